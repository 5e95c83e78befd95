"""Match-mismatch decoding of auditory EEG with dilated convolutional networks."""

__version__ = "0.1.0"
