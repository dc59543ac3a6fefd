"""Black-box variational inference with fixed-noise sample-average objectives.

The package maximizes the evidence lower bound by solving a sequence of
deterministic subproblems: each subproblem fixes a block of base-distribution
noise, turning the Monte Carlo ELBO into a smooth function of the variational
parameters that a quasi-Newton solver can drive to convergence. An outer loop
doubles the sample size until a statistical test says the fixed-noise optimum
generalizes. A stochastic-gradient baseline and an unboundedness diagnostic
for low-sample full-covariance fits round out the toolkit.
"""

__version__ = "0.1.0"
