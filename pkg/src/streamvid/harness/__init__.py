"""Training, evaluation and experiment plumbing around the model modules."""
