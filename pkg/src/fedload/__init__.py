"""Federated, NILM-based household load forecasting."""
