"""obsverify: probabilistic verification of observational properties.

Checks approximate detectability, approximate opacity, and custom
two-trace finite-horizon hyperformulas on discrete-time stochastic
systems: formulas compile to automata, the twin-system product reduces
satisfaction to terminal reachability, dynamic programming supplies
oracle values, and terminal-reach barrier certificates (table- or
MLP-backed) yield probability lower bounds.
"""

__version__ = "0.1.0"
