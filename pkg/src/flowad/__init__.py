"""flowad: multivariate time-series anomaly detection with conditional flows.

The pipeline: cluster correlated series (DTW + OPTICS), learn an exact
conditional density over sliding windows (LSTM encoder-decoder conditioning a
RealNVP flow), flag timestamps by log-density with static or streaming
extreme-value thresholds, diagnose flagged timestamps down to individual
features with kernel density estimates, and generate labeled synthetic data
for supervised classification.
"""

__version__ = "0.1.0"
