"""One-shot object localization from a pointing hand.

A small trainable vision stack: a valid-convolution backbone, beam-shaped
attention modulation that learns to read the pointing hand with no dedicated
loss, spatial soft-argmax localization, and a Siamese matched filter that
re-finds a taught object in new scenes from a single stored feature vector.
"""

from .attention import (
    BeamSpec,
    HandPose,
    MapBank,
    build_map_bank,
    extract_feature,
    hand_pose,
    soft_select_map,
    spatial_softargmax,
)
from .errors import DataError, ShapeError, ValidationError
from .model import (
    PRESETS,
    ExemplarOutput,
    ModelParams,
    Preset,
    SearchOutput,
    baseline_conv_forward,
    baseline_fc_forward,
    conv_block,
    coord_map,
    exemplar_forward,
    receptive_field,
    search_forward,
)
from .scenegen import (
    Dataset,
    Sample,
    SceneConfig,
    build_dataset,
    compose_scene,
    generate_sprite_library,
)
from .tensor import Tape, Tensor, backward
from .training import (
    Adam,
    Localizer,
    ObjectStore,
    TrainConfig,
    evaluate_accuracy,
    find,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    teach,
    train,
)

__version__ = "0.1.0"
