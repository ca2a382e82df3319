"""Gated recurrent networks with reduced-parameter GRU gate variants, trained with
hand-written backpropagation through time."""

__version__ = "0.1.0"
