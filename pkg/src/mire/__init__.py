"""Mix-and-reason domain generalization on a synthetic shape benchmark."""

__version__ = "0.1.0"
