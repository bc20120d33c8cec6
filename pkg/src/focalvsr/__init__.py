"""Synthetic focal blur, blur-map estimation, flow propagation and a
map-guided sparse transformer forward pass for video refocusing."""

__version__ = "0.1.0"
