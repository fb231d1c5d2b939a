"""Rotation-memory RNN lab.

Synthetic long-memory benchmarks (copy, variable copy, adding), four
recurrent architectures with exact backpropagation through time,
hand-built closed-form solutions of both tasks, and a seeded experiment
runner that reproduces the headline training trends at desk scale.
"""

from .linalg import (
    block_rotation,
    eigenvalue_phases,
    gemm,
    make_rng,
    nearest_orthogonal,
    sample_unit_sphere,
    spectral_norm,
)
from .tasks import (
    AddingConfig,
    AddingSample,
    CopyConfig,
    CopySample,
    adding_baseline,
    copy_baseline,
    encode_adding_inputs,
    encode_copy_inputs,
    encode_one_hot,
    gen_adding,
    gen_copy,
)
from .models import (
    ForwardTrace,
    LstmParams,
    LtRnnParams,
    PooledLtRnnParams,
    SRnnParams,
    forward,
    l2_pool,
    load_params,
    lstm_forward,
    ltrnn_forward,
    pooled_forward,
    save_params,
    sequence_loss,
    srnn_forward,
)
from .training import (
    backward,
    grad_check,
    init_transition,
    ortho_penalty_step,
    rmsprop_init,
    rmsprop_step,
)
from .mechanisms import (
    build_adding_mechanism,
    build_copy_mechanism,
    evaluate_copy_mechanism,
    interference_stat,
    success_sweep,
)
from .experiment import (
    ExperimentConfig,
    MetricsRecord,
    run_activation_probe,
    run_figure1,
    run_training,
)

__version__ = "0.1.0"
