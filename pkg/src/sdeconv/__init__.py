"""Double implicit Milstein schemes and a coupled Monte Carlo convergence harness."""

__version__ = "0.1.0"
