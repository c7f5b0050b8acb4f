"""Link-level OTFS integrated sensing and communication toolkit.

Delay-Doppler channel models with analytic parameter derivatives,
estimation bounds and communication MSE for pre-equalized links, a
residual-stack channel-parameter forecaster, a dual-branch residual
pre-equalization network trained on a weighted comm/sensing objective,
and a reproducible experiment harness with a command-line front end.
"""

from .channel import (
    ChannelMatrix,
    PathParams,
    channel_derivative,
    dd_channel,
    derivative_stack,
    td_channel,
)
from .comm import (
    expected_mse,
    mmse_expected_mse,
    mmse_receiver,
    monte_carlo_link,
    receiver_complexity,
    regularized_inverse,
    zf_preeq,
)
from .crlb import (
    CRLBMatrix,
    FisherInfo,
    crlb,
    fim,
    fim_monte_carlo,
    sensing_objective,
)
from .experiments import (
    CSI_MODES,
    ExperimentConfig,
    LIBRARY_VERSION,
    build_instance_sets,
    complexity_rows,
    forecast_dataset,
    load_config,
    mape_table,
    prepare_dataset,
    run_tradeoff,
    train_all_predictors,
    train_preeq_family,
    write_snapshot,
)
from .otfs import FrameConfig, dd_to_td, map_symbols, td_to_dd
from .predictor import (
    ForecastModel,
    PredictorConfig,
    evaluate_mape,
    init_model,
    load_model,
    save_model,
    train_predictor,
)
from .preeq import (
    PreEqConfig,
    PreEqInstance,
    PreEqNetwork,
    evaluate_preeq,
    infer,
    init_network,
    load_network,
    make_instance,
    save_network,
    train_preeq,
)
from .scenario import (
    PARAM_FIELDS,
    ParamDataset,
    SceneScale,
    build_dataset,
    load_dataset,
    make_scenarios,
    save_dataset,
)

__version__ = LIBRARY_VERSION
