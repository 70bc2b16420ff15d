"""Band-split RNN music source separation."""
