"""Desk-scale simulator of memory-constrained federated LoRA fine-tuning with layer pruning."""

__version__ = "0.1.0"
