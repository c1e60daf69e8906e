"""Joint training loop, optimizer and checkpoints."""
