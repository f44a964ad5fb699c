"""Static verification of safety properties for lambda-actor programs.

The pipeline is: parse and normalize a program (:mod:`syntax`), abstract
interpretation of its machine semantics (:mod:`machine`, :mod:`absdomains`,
:mod:`analysis`), construction of an actor communicating system
(:mod:`acsgen`), and coverability checking of the resulting vector addition
system (:mod:`vas`).  :mod:`cli` ties the stages together.
"""

from importlib.resources import files

__version__ = "0.1.0"


def benchmark_source(name: str) -> str:
    """Source text of a bundled benchmark, e.g. ``benchmark_source("reslock")``."""
    return (files(__name__) / "benchmarks" / f"{name}.lact").read_text()


BENCHMARKS = ("reslock", "server", "stutter", "howait", "sieve")
