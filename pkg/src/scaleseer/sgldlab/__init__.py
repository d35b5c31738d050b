"""Langevin sampling of small networks to test scaling predictions."""

from .chain import ChainResult, langevin, run_chain, run_chains
from .measure import (
    AlignmentSamples,
    alignment_from_values,
    count_specialized,
    expected_xent_gp,
    first_layer_overlaps,
    layer1_threshold,
    layer2_linear_overlaps,
    layer2_threshold,
    measure_alignment,
    xent_mc_oracle,
    xent_second_order_coeff,
)
from .networks import Dataset, NetworkSpec, TargetSpec, TrainConfig, forward, potential_and_grad, sample_dataset
