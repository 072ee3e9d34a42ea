"""Single-step remote-sensing super-resolution with a residual autoencoder
and a latent consistency model trained from scratch."""

from .backbone import (CondNet, ModelSpec, PatchDiscriminator, ResidualAutoencoder, UNet,
                       build_networks, cond_features, decode, denoise_eps, encode)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, resolve_config, tiny_config
from .datapipe import ImagePair, build_dataset, make_pair, synth_corpus, write_pairs
from .evaluation import (available_metrics, benchmark_runtime, image_psnr, metric_report,
                         perceptual_metric, psnr, register_metric)
from .imaging import bicubic_resize, load_image, save_image
from .lcd_stage import (ConsistencyConfig, consistency_fn, ct_loss, ema_update, kd_loss,
                        train_lcd)
from .rae_stage import discriminator_loss, rae_loss, train_rae
from .sampler import SRPipeline, sample_ancestral, sample_single_step
from .schedule import NoiseSchedule, boundary_coeffs, forward_noise, make_schedule

__version__ = "0.1.0"
