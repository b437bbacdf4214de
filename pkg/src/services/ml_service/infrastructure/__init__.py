"""
Losses, metrics, optimizer and the staged training service.
"""
