"""EB-GAME: ECG beat anomaly detection with a GAN-trained, wave-masked autoencoder."""

__version__ = "0.1.0"
