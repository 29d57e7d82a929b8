"""Evidence-gated diffusion policy sampling with calibrated likelihood-ratio thresholds."""

__version__ = "1.0.0"
