"""dytb: a numerical laboratory for dyadic singular-integral models.

The pieces, bottom up: exact piecewise-constant calculus on truncated dyadic
grids (``grid``), perfect dyadic kernels with fast hierarchical application
(``kernels``), systems of accretive test functions (``accretive``), terminal
and stopping-cube constructions with packing and Carleson measurements
(``corona``), twisted martingale calculus and its exact identities
(``twisted``), and norm/testing-constant estimation plus the seeded ratio
experiment (``verify``).  ``cli`` wraps it all for the command line.
"""

__version__ = "0.1.0"

from .grid import (
    DyadicCube,
    GridFunction,
    GridSpec,
    average,
    child_containing,
    dyadic_maximal,
    lp_norm,
)
from .kernels import (
    PerfectKernel,
    adjoint,
    apply,
    bilinear,
    dense_matrix,
    generate_kernel,
    load_kernel,
    save_kernel,
    size_bound,
    validate_size,
)
from .accretive import AccretiveSystem, get_b, validate
from .corona import (
    ConfigError,
    CoronaForest,
    DeltaSearch,
    TbConfig,
    TerminalFamily,
    build_corona,
    carleson_constant,
    choose_delta,
    forest_to_json_dict,
    make_terminal_family,
    packing_ratio,
    terminal_cubes,
)
from .twisted import (
    SignChoice,
    TwistedContext,
    block_context,
    box,
    classical_transform,
    corona_delta,
    corona_expectation,
    corona_transform,
    delta_decomp_check,
    decomposition_identity_check,
    expand,
    half_twisted_D,
    make_context,
    measure_comparison_check,
    proof_operators,
    transform,
    twisted_delta,
)
from .verify import (
    ExperimentConfig,
    VerifierReport,
    adversarial_transform_search,
    b_above_aggregation,
    b_above_per_s_check,
    bilinear_expansion_check,
    box_square_function_check,
    build_instance,
    diagonal_lemma_check,
    epsilon_coefficient,
    form_split,
    identity_suite,
    main_theorem_experiment,
    operator_norm,
    power_norm,
    testing_constant,
)
