"""
Training schedule, optimizer state and report entities.
"""
