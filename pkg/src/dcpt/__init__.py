"""Frame-level deepfake detection: a convolutional feature extractor feeding a
three-phase Transformer, trained on keyframe faces, with a small numpy
autodiff core underneath."""

__version__ = "0.1.0"
