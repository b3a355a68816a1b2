"""Time-bin decoy-state BB84 over a turbulent, depolarizing free-space link.

Simulation of the photon path (source, channel, decoder, detectors) plus the
post-processing chain that turns time tags into secret key and channel
diagnostics (Fried parameter, polarization purity).
"""

__version__ = "0.1.0"
