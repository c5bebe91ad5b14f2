"""Parameter-adaptive approximate MPC for cartpole swing-up.

The package imitates a parameterized nonlinear MPC with two feed-forward
networks (a nominal policy net and a policy-sensitivity net), adapts the
policy linearly in the plant parameters, and auto-tunes those parameters
against a sparse closed-loop reward with a single-trust-region Bayesian
optimizer plus a Sobol-sampling baseline.
"""

__version__ = "0.1.0"
