"""zstoresim: out-of-place zoned storage engine on a simulated flash device."""

__version__ = "0.1.0"
