MAX_TANGENT_NORM = 1.5
"""Bound on the spatial norm of tangent vectors at the origin."""
EXP_MAP_EPS = 1e-12
"""Tangent norm under which the exponential map returns its base point."""
TANGENT_EPS = 1e-6
"""Tolerance on <v, p>_L for a vector to count as tangent at p."""
DEGENERATE_EPS = 1e-15
"""Lower bound on |<s, s>_L| for a codeword aggregate to be normalized."""
ACOSH_EPS = 1e-15
"""Width of the band above 1 where acosh is flushed to 0."""

CODEWORD_INIT_STD = 0.05

MODEL_MAGIC = b'HIPQ'
MODEL_VERSION = 1
CODES_MAGIC = b'HIPC'
CODES_VERSION = 1
MANIFOLD_TOLERANCE = 1e-6
"""Largest relative manifold residual accepted for a loaded codeword."""
