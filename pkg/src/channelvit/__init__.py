"""Channel Vision Transformer with hierarchical channel sampling.

A dependency-light implementation of channel-token transformers, the sampling
regularizer, exhaustive channel-combination evaluation, attribution tooling,
and a synthetic multi-channel data generator.
"""

__version__ = "0.1.0"

from .models import (ModelConfig, ModelParams, TokenSequence, init_params,
                     embed_channelvit, embed_vit, forward, forward_multivit,
                     shared_channel_embedding_eval, save_checkpoint,
                     load_checkpoint, patchify)
from .sampling import (ChannelCombination, SamplerConfig, ChannelSampler,
                       Xoshiro256StarStar, hcs_sample, dropout_sample,
                       exact_size_distribution, enumerate_combinations)
from .training import (ScheduleConfig, AdamW, lr_at, wd_at, train_step,
                       train_model, mixed_train_epoch)
from .evaluation import evaluate_all_combinations, gain_report
from .relevance import (attention_rollout, grad_relevance, rollout_relevance,
                        channel_relevance_summary, RelevanceMap)
from .datagen import (SynthConfig, Dataset, generate, save_dataset,
                      load_dataset, channel_embedding_correlation)
