"""Joint fullband-subband modeling for 44.1 kHz singing-voice deepfake detection."""

__version__ = "0.1.0"
