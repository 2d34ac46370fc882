"""Active margin requirements for margin loans priced on a Markov chain of grouped closes."""

__version__ = "0.1.0"

from .backtest import (
    BacktestConfig,
    QuantileTable,
    compare_systems,
    corpus_report,
    pass_test,
    quantile_analysis,
    run_out_of_sample,
    simulate_loan_default,
    simulate_loan_topup,
)
from .cpnr import CpnrGrid, CpnrResult, LoanQuery, cpnr, cpnr_exact_enumeration
from .errors import MarginEngineError
from .margin import (
    REQUIRED_SYSTEM,
    MarginSystem,
    OptimizerConfig,
    deduce_margin_system,
    indifference_set,
    individualized_maintenance,
    initial_margin_adequate,
    margin_dynamics,
    margin_schedule,
)
from .markov import (
    build_state_space,
    count_transitions,
    estimate_one_step,
    fit_window,
    markov_chi_square_test,
    n_step,
    state_of,
)
from .prices import PriceSeries, SyntheticSpec, generate_synthetic, load_price_csv, window
from .report import emit_report
