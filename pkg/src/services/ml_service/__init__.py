# Training, losses, metrics and evaluation
