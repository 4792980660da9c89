"""Gaussian-process surrogates of the DistFlow OPF mapping."""

__version__ = "0.1.0"
