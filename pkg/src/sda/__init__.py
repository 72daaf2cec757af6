"""Score-based generative downscaling of spatiotemporal fields.

Train a diffusion prior on fine-resolution trajectories, then sample
posterior trajectories conditioned on coarse block-averaged, temporally
subsampled observations. Includes quantile-mapping preprocessing, an
interpolation baseline, and an evaluation suite.
"""

from .diffusion import DEFAULT_SCHEDULE, VpCosineSchedule, dsm_loss, perturb
from .errors import (DataError, DomainError, FormatError, NumericalError, SdaError,
                     ShapeError, WriteError)
from .fields import (NormStats, TrajectoryTensor, VariableMask, denormalize, normalize,
                     read_trajectory, write_trajectory)
from .metrics import (MetricReport, PowerCurve, anomaly, ks_critical, ks_uniform,
                      mean_rapsd, melr, pit, rapsd, sliced_w1, ssim, wind_power, wind_speed)
from .nets import (Checkpoint, ScoreNetwork, TrainConfig, load_checkpoint,
                   save_checkpoint, train)
from .observation import (CoarseObservation, ObservationSpec, coarsen, information_ratio,
                          log_likelihood_grad_wrt_xhat, normalize_observation,
                          observed_shape, read_observation, write_observation)
from .quantile import QuantileMap, apply_qm, bcsd, fit_qm, read_quantile_map, write_quantile_map
from .sampler import SamplerConfig, posterior_score, sample, sample_chain, xhat0
from .sequence import ComposeConfig, compose_score, window_plan
from .synth import SynthConfig, generate, make_pair

__version__ = "0.1.0"
