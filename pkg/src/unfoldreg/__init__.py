"""Deep unfolding as iterative regularization."""
