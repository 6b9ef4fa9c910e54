"""Dual-pipeline LoRA language extension for a frozen encoder-decoder ASR
model, small enough to train and verify on one CPU."""

__version__ = "0.1.0"
