"""Self-organizing mixture networks for grayscale images."""
