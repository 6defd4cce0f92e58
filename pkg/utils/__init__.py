"""Multi-view self-distillation bench: signal pooling, toy model, trainer and command line."""
