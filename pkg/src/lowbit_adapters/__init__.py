"""Low-bit adapter quantization toolkit."""
