"""Certified input-output properties of polynomial systems from noisy data."""

from .certify import BackendOptions, Certificate, ConicProgram, PolyExpr
from .dataio import (Constant, NoiseModel, OperationSet, PolySystem, Prbs,
                     SampleSet, SineChirp, SumSignal, default_signal_pool,
                     empirical_gain_lower_bound, noise_bounds, simulate)
from .iqc import (IqcCertificate, IqcFilter, IqcSpec, preset, synthesize_iqc,
                  verify_hard_iqc_empirical, verify_peak_bound_empirical)
from .membership import (CoefficientSuperset, DualBlock, DualizationFailed,
                         NotAnEllipsoid, RankDeficient, UnboundedSigma,
                         consistency_experiment, dual_blocks, dualize,
                         extremal_radius, superset_cumulative,
                         superset_pointwise, superset_window)
from .nlm import (LinearModel, NlmCertificate, RecoveryFailed,
                  best_linearization, l2_gain_bound, recover_linear_model,
                  synthesize_ae_nlm, verify_ae_nlm)
from .poly import (GramForm, Monomial, NotRepresentable, PolyMatrix,
                   Polynomial, gram_decompose, kernel_basis, monomial_basis,
                   quadratic_decomposition_map)
from .sector import (SectorBound, SectorViolated, TaylorEnvelope,
                     augmented_superset, certify_stability_taylor,
                     synthesize_nlm_sector, taylor_membership,
                     taylor_sector_bound)

__version__ = "0.1.0"
