"""Second-order Volterra convolution layers and a small Wide-ResNet trainer in NumPy."""

__version__ = "0.1.0"
