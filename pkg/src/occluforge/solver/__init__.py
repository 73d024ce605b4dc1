"""Position and rotation solvers, their losses, training and chain analysis."""
