VERSION = '0.1.0'

MIN_SEED = 0
MAX_SEED = 2 ** 64 - 1

# utility validation grid
VALIDATION_POINTS = 101
REAL_LINE_RANGE = (-10.0, 10.0)
HALF_LINE_RANGE = (1e-3, 10.0)
INVERSE_RTOL = 1e-10
DERIVATIVE_RTOL = 1e-5
FINITE_DIFFERENCE_STEP = 1e-5
HARA_RTOL = 1e-8
BOUND_SAFETY_FACTOR = 1.5

# market
THETA_GRID_FACTOR = 10
THETA_SAFETY_FACTOR = 1.0

# path generation
PATH_BLOCK_SIZE = 1024
STREAM_LAYOUT = f'philox-b{PATH_BLOCK_SIZE}-v1'

# backward solver
MAX_DEGREE = 5
DEFAULT_DEGREE = 3
DEFAULT_BINS = 8
MAX_CONDITION = 1e12
COLLINEAR_TOLERANCE = 1e-6
NEWTON_MAX_ITERATIONS = 20
NEWTON_TOLERANCE = 1e-12
Y_BOUND_FACTOR = 10.0

# coupled solvers
FIXED_POINT_TOLERANCE = 1e-3
FIXED_POINT_MAX_ITERATIONS = 50
DAMPING = 0.5
PICARD_MAX_ITERATIONS = 30
PICARD_TOLERANCE = 1e-3
DOMAIN_CLIP = 1e-8
DIVERGENCE_FACTOR = 5.0
BRACKET_GROWTH_LIMIT = 10.0

# diagnostics
DEFAULT_Z = 3.0
MIN_TEST_PATHS = 100
NODE_THINNING = 8
TEST_DEGREE = 2
FLOAT_FLOOR = 1e-12
STRATEGY_IDENTITY_TOLERANCE = 1e-12
EXACT_IDENTITY_RTOL = 1e-12
HAMILTONIAN_RTOL = 1e-10
MERTON_RTOL = 0.05
RESIDUAL_RMS_CONSTANT = 1.0
MAX_VIOLATION_FRACTION = 1e-3
PERTURBATION_EPSILON = 0.1
CONVERGENCE_MIN_ORDER = 0.4

# exit codes
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MAX_ITERATIONS = 2
EXIT_INFEASIBLE = 3
EXIT_VERIFICATION_FAILED = 4
