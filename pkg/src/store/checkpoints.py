"""
Checkpoint save/load for networks, the dual encoder and Step-1 experts.

Layouts are documented in formats.py. Every load re-validates shapes and
raises RejectedInputError on anything malformed.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..lib.errors import RejectedInputError
from ..lib.guidg import CmattnParams, ExpertSet
from ..lib.miniclip import EncoderPair, PromptExpert
from ..lib.nn_core import MlpModel
from ..models import Activation
from .formats import (
    CMATTN_FILE,
    EXPERT_FILE_TEMPLATE,
    MATRIX_FLOAT_FORMAT,
    MLP_MAGIC,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# =============================================================================
# Single networks
# =============================================================================

def mlp_to_text(model: MlpModel) -> str:
    lines = [
        MLP_MAGIC,
        "layer_sizes " + " ".join(str(n) for n in model.layer_sizes),
        f"activation {Activation(model.activation).value}",
    ]
    for param in model.parameters():
        lines.extend(repr(float(v)) for v in param.ravel())
    return "\n".join(lines) + "\n"


def mlp_from_text(text: str) -> MlpModel:
    lines = text.splitlines()
    if len(lines) < 3 or lines[0].strip() != MLP_MAGIC:
        raise RejectedInputError(f"not a {MLP_MAGIC} checkpoint")

    head, *sizes = lines[1].split()
    if head != "layer_sizes" or len(sizes) < 2:
        raise RejectedInputError("line 2 must be 'layer_sizes n_0 ... n_L'")
    try:
        layer_sizes = [int(s) for s in sizes]
        head, name = lines[2].split()
        activation = Activation(name)
    except ValueError as e:
        raise RejectedInputError(f"malformed checkpoint header: {e}") from e
    if head != "activation":
        raise RejectedInputError("line 3 must be 'activation <name>'")

    values = [line for line in lines[3:] if line.strip()]
    skeleton = MlpModel.zeros(layer_sizes, activation)
    if len(values) != skeleton.param_count():
        raise RejectedInputError(
            f"expected {skeleton.param_count()} parameters, found {len(values)}"
        )
    try:
        flat = np.array([float(v) for v in values], dtype=np.float64)
    except ValueError as e:
        raise RejectedInputError(f"malformed parameter value: {e}") from e

    params, offset = [], 0
    for template in skeleton.parameters():
        params.append(flat[offset:offset + template.size].reshape(template.shape))
        offset += template.size
    return skeleton.with_parameters(params)


def save_mlp(model: MlpModel, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(mlp_to_text(model))
    return path


def load_mlp(path: PathLike) -> MlpModel:
    return mlp_from_text(Path(path).read_text())


# =============================================================================
# Matrices
# =============================================================================

def _save_matrix(matrix: np.ndarray, path: Path):
    np.savetxt(path, np.atleast_2d(matrix), fmt=MATRIX_FLOAT_FORMAT)


def _load_matrix(path: Path) -> np.ndarray:
    if not path.exists():
        raise RejectedInputError(f"missing checkpoint file: {path.name}")
    try:
        return np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise RejectedInputError(f"malformed matrix in {path.name}: {e}") from e


def _write_manifest(directory: Path, manifest: Dict):
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_manifest(directory: Path) -> Dict:
    path = directory / "manifest.json"
    if not path.exists():
        raise RejectedInputError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())


# =============================================================================
# Dual encoder
# =============================================================================

def save_encoder_pair(pair: EncoderPair, directory: PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mlp(pair.vision_encoder, directory / "vision.mlp")
    save_mlp(pair.text_encoder, directory / "text.mlp")
    _save_matrix(pair.class_embeddings, directory / "class_embeddings.txt")
    _save_matrix(pair.default_context, directory / "default_context.txt")
    _write_manifest(directory, {
        "d_f": pair.d_f,
        "embed_dim": pair.embed_dim,
        "C": pair.n_classes,
        "tau": pair.temperature,
        "prompt_len": pair.prompt_len,
        "feature_dim": pair.feature_dim,
    })
    logger.info("saved encoder pair to %s", directory)
    return directory


def load_encoder_pair(directory: PathLike) -> EncoderPair:
    directory = Path(directory)
    manifest = _read_manifest(directory)
    pair = EncoderPair(
        vision_encoder=load_mlp(directory / "vision.mlp"),
        text_encoder=load_mlp(directory / "text.mlp"),
        class_embeddings=_load_matrix(directory / "class_embeddings.txt"),
        default_context=_load_matrix(directory / "default_context.txt"),
        temperature=float(manifest["tau"]),
    )
    if (pair.d_f, pair.n_classes, pair.prompt_len) != (manifest["d_f"], manifest["C"], manifest["prompt_len"]):
        raise RejectedInputError("encoder files disagree with manifest.json")
    return pair


# =============================================================================
# Step-1 experts and CMAttn
# =============================================================================

def _cmattn_rows(params: CmattnParams) -> List[str]:
    rows = [row for row in params.W_q] + [params.b_q, params.w_k, params.b_k]
    return [" ".join(MATRIX_FLOAT_FORMAT % v for v in row) for row in rows]


def _cmattn_from_rows(rows: Sequence[str], d_f: int) -> CmattnParams:
    if len(rows) != d_f + 3:
        raise RejectedInputError(f"{CMATTN_FILE} must have d_f + 3 = {d_f + 3} rows")
    try:
        values = [np.array([float(v) for v in row.split()], dtype=np.float64) for row in rows]
    except ValueError as e:
        raise RejectedInputError(f"malformed value in {CMATTN_FILE}: {e}") from e
    return CmattnParams(W_q=np.vstack(values[:d_f]), b_q=values[d_f], w_k=values[d_f + 1], b_k=values[d_f + 2])


def save_experts(
    experts: ExpertSet,
    params: CmattnParams,
    directory: PathLike,
    config: Optional[Dict] = None,
) -> Path:
    experts.require_prompts()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for expert in experts.prompts:
        _save_matrix(expert.embeddings, directory / EXPERT_FILE_TEMPLATE.format(domain_id=expert.domain_id))
    (directory / CMATTN_FILE).write_text("\n".join(_cmattn_rows(params)) + "\n")
    first = experts.prompts[0]
    _write_manifest(directory, {
        "d": experts.size,
        "C": params.n_classes,
        "d_f": params.d_f,
        "prompt_len": first.prompt_len,
        "embed_dim": first.embeddings.shape[1],
        "domain_ids": experts.domain_ids,
        "config": config or {},
    })
    logger.info("saved %d experts to %s", experts.size, directory)
    return directory


def load_experts(directory: PathLike) -> Tuple[List[PromptExpert], CmattnParams, Dict]:
    """Prompts in manifest order, CMAttn parameters, manifest."""
    directory = Path(directory)
    manifest = _read_manifest(directory)
    prompts = []
    for domain_id in manifest["domain_ids"]:
        embeddings = _load_matrix(directory / EXPERT_FILE_TEMPLATE.format(domain_id=domain_id))
        if embeddings.shape != (manifest["prompt_len"], manifest["embed_dim"]):
            raise RejectedInputError(f"expert {domain_id} has shape {embeddings.shape}")
        prompts.append(PromptExpert(int(domain_id), embeddings))

    cmattn_path = directory / CMATTN_FILE
    if not cmattn_path.exists():
        raise RejectedInputError(f"missing checkpoint file: {CMATTN_FILE}")
    rows = [line for line in cmattn_path.read_text().splitlines() if line.strip()]
    params = _cmattn_from_rows(rows, int(manifest["d_f"]))
    if params.n_classes != manifest["C"]:
        raise RejectedInputError("CMAttn key width disagrees with manifest C")
    return prompts, params, manifest
