"""Dense float64 kernels with explicit forward and backward rules."""
