"""Grad-CAM style explanations for embedding networks via triplet grad-weights
and nearest-neighbor weight transfer."""

__version__ = "0.1.0"

from .activations import ActivationKind, RankPairParams, TripletConfig, activation_grad, triplet_loss
from .backbone import BackboneConfig, backbone_forward
from .gradweights import (BuildConfig, SparseWeights, Triplet, grad_weights_aggregate,
                          grad_weights_single, sample_triplets, top_m)
from .head import HeadParams, finite_diff_check, head_backward, head_forward, load_head, save_head
from .heatmap import (Heatmap, RegionAnnotation, grad_cam_heatmap, iou, localization_accuracy,
                      localize, normalize_heatmap, region_score, upsample_bilinear, write_pgm)
from .tensor import Tensor, read_tensor, write_tensor
from .weightdb import (WeightDatabase, build_database, compact_kmeans, db_stats, load_database,
                       query_nearest, save_database)
