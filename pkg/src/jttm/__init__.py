"""Just-train-twice with Mahalanobis error-set pruning, on fixed feature vectors."""

__version__ = "0.1.0"
