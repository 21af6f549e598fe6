"""Differentiable discrete communication: shared-noise quantization channel,
variable-length coding, bit-cost surrogate, and a speaker/listener trainer."""

__version__ = "0.1.0"
