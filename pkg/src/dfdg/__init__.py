"""One-shot federated learning with data-free dual-generator distillation."""
