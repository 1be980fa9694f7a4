"""Desk-scale confidential container control plane.

Everything a real deployment would get from TEE hardware is simulated by
:mod:`tcx.mock_tee`; everything else (role PKI, sealed images, measured boot,
control-plane actors, secure channels) is real protocol code that runs either
on the deterministic :mod:`tcx.simnet` carrier or over local TCP sockets.
"""

__version__ = "0.1.0"
