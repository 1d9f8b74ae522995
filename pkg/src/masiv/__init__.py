"""masiv: differentiable MPM toolkit for learning neural constitutive laws."""

__version__ = "0.1.0"
