"""Learning Green's functions with two-scale networks and solving PDEs by quadrature."""

__version__ = "0.1.0"
