"""Flow-based synthetic data with privacy auditing and meta-analysis.

The package trains masked autoregressive flows by exact maximum
likelihood, generates synthetic datasets (latent noise injection, flow
sampling, direct noise), audits privacy leakage (membership-inference
AUC, neighbor ranks, closed-form local-DP budgets), calibrates the
perturbation weight, and pools study-level estimates with fixed- and
random-effects meta-analysis.
"""

__version__ = "0.1.0"
