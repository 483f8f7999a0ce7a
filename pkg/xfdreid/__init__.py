"""
Cross-Domain Tracklet Re-Identification
Temporal attention pooling, multi-term training and k-reciprocal re-ranking
"""

__version__ = "1.0.0"
