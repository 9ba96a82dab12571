"""VisionGuard: adversarial-image detection by lossy-transform consistency."""

__version__ = "0.1.0"
