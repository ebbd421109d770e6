"""Sequential contrastive learning on paired feature sequences.

Library layout mirrors the pipeline: `data` (SEQF I/O, manifests,
synthesis, batching), `kernels` (sequential distances with gradients),
`losses` (contrastive objectives), `encoder` (toy trainable encoders and
the training loop), `retrieval` (agg/seq/hybrid engines and benchmarks),
`verification` (finite-difference and brute-force oracles), `cli`.
"""

__version__ = "0.1.0"

from .data import (FeatureSequence, PairManifest, PairedBatch, SynthConfig, gen_synthetic,
                   load_manifest, load_seqf, make_batches, save_seqf, synth_pairs)
from .kernels import (DistanceMatrix, EuclInterp, HardDTW, KernelGrad, SoftDTW, Wasserstein,
                      eucl_dist, hard_dtw, linear_interp, pairwise_matrix, soft_dtw,
                      wasserstein)
from .losses import (LossResult, NormalizedDistances, Temperature, cav_loss, multitask_loss,
                     scav_loss, zscore)
from .encoder import (EncoderParams, TrainConfig, TrainReport, adam_step, cosine_lr, encode,
                      encode_backward, encode_pairs, init_encoder, load_checkpoint,
                      save_checkpoint, train)
from .retrieval import (Agg, Hybrid, RetrievalReport, Seq, agg_retrieve, bench,
                        hybrid_retrieve, recall_at, retrieve_pairs, seq_retrieve)
from .verification import (GradCheckReport, brute_dtw, brute_wasserstein, numeric_gradient,
                           run_gradcheck)
