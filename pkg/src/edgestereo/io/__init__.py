"""File formats, model files and synthetic scenes."""

from .formats import (
    atomic_write,
    encode_pfm,
    encode_pgm,
    load_image,
    load_mask,
    parse_pfm,
    parse_pgm,
    parse_png,
    read_pfm,
    save_image,
    save_mask,
    save_visualization,
    write_pfm,
)
from .models import load_float_model, load_qmodel, save_float_model, save_qmodel
from .synthetic import Plane, SyntheticSceneSpec, generate_synthetic_pair, plane_scene, two_plane_scene
