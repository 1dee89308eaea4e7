"""Interictal spike detection in MEG with Time CNN and Time CNN-GCN classifiers"""

__version__ = "0.1.0"
