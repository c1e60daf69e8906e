"""Day-level gated convolutional autoencoder."""
