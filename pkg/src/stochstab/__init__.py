"""Almost-sure stabilization of controlled degenerate diffusions.

Pointwise verification of Lyapunov-type conditions over control grids,
universal-formula feedback synthesis for affine systems, and counter-seeded
Euler-Maruyama Monte Carlo with empirical stability certificates.
"""

from .feedback import (AffineSystem, FeedbackLaw, closed_loop, saturation_check, sontag_phi,
                       synthesize_multi_input, synthesize_single_input, zero_law)
from .model import (ComparisonPair, ControlSet, ControlSystem, LyapunovCandidate, TargetSet,
                    fit_comparison_pair, quadratic_candidate)
from .pipeline import RunReport, run
from .scenario import Scenario, ScenarioError, builtin_scenario, dump_scenario, load_scenario
from .builtins import list_builtins
from .simulator import (MonteCarloReport, Metrics, euler_maruyama, run_monte_carlo,
                        stability_certificate, target_bound_check)
from .verifier import (Tolerances, VerificationReport, check_clf_at, check_strict_clf_at,
                       constrained_hamiltonian, verify_region)

__version__ = "0.1.0"

__all__ = [
    "AffineSystem", "ComparisonPair", "ControlSet", "ControlSystem", "FeedbackLaw", "LyapunovCandidate",
    "Metrics", "MonteCarloReport", "RunReport", "Scenario", "ScenarioError", "TargetSet", "Tolerances",
    "VerificationReport", "builtin_scenario", "check_clf_at", "check_strict_clf_at", "closed_loop",
    "constrained_hamiltonian", "dump_scenario", "euler_maruyama", "fit_comparison_pair", "list_builtins",
    "load_scenario", "quadratic_candidate", "run", "run_monte_carlo", "saturation_check", "sontag_phi",
    "stability_certificate", "synthesize_multi_input", "synthesize_single_input", "target_bound_check",
    "verify_region", "zero_law",
]
