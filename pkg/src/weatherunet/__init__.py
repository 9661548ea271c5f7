"""Weather robustification toolkit: synthetic fog/rain/snow, a numpy UNet
denoiser trained from scratch, and a detection harness measuring MSE and
mAP@0.5 on graded adversity sets."""

__version__ = "0.1.0"
