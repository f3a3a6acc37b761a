"""
On-disk layouts for guidg-mini artifacts.
All files are plain text so runs can be diffed and audited.

Layouts:
- mlp checkpoint: one network per file
- encoder checkpoint: directory holding the frozen dual encoder
- expert checkpoint: directory holding Step-1 prompts and CMAttn
- dataset CSV: one row per sample, all domains in one file
- report: result table + sibling manifest

Key design decisions:
1. Floats are written with repr / %.17g, so every load is bit-exact
2. Every directory carries a manifest.json describing its shapes
3. Result tables are rounded to 6 significant digits; checkpoints never are
"""

MLP_MAGIC = "guidg-mlp v1"
ARTIFACT_VERSION = "guidg-mini 1"

MLP_LAYOUT = """
line 1   guidg-mlp v1
line 2   layer_sizes <n_0> <n_1> ... <n_L>
line 3   activation <tanh|relu|identity>
line 4+  one float per line, layer by layer: W_l row-major, then b_l
"""

ENCODER_DIR_FILES = (
    "vision.mlp",
    "text.mlp",
    "class_embeddings.txt",
    "default_context.txt",
    "manifest.json",
)
ENCODER_MANIFEST_KEYS = ("d_f", "embed_dim", "C", "tau", "prompt_len", "feature_dim")

EXPERT_FILE_TEMPLATE = "expert_{domain_id}.txt"
CMATTN_FILE = "cmattn.txt"
EXPERT_MANIFEST_KEYS = ("d", "C", "d_f", "prompt_len", "embed_dim", "domain_ids", "config")

# CMAttn is flattened as W_q (d_f x d_f), b_q (d_f), w_k (C), b_k (1), one row each
# after W_q's d_f rows.
CMATTN_LAYOUT = """
rows 1..d_f   W_q
row  d_f+1    b_q
row  d_f+2    w_k
row  d_f+3    b_k
"""

MATRIX_FLOAT_FORMAT = "%.17g"

DATASET_ID_COLUMN = "domain_id"
DATASET_LABEL_COLUMN = "label"
DATASET_FEATURE_PREFIX = "f"

REPORT_FLOAT_FORMAT = "%.6g"
MANIFEST_SUFFIX = ".manifest.json"

TOY_COLUMNS = ("h1", "R_B", "R_O", "E_B", "E_O", "R", "r")
DG_COLUMNS = ("seed", "target_domain", "method", "accuracy")
ABLATION_COLUMNS = ("data_mode", "variant", "mean_accuracy", "n_evaluations")
WEIGHT_COLUMNS = (
    "target_domain",
    "expert_domain",
    "mean_weight",
    "solo_accuracy",
    "ensemble_accuracy",
    "best_solo_accuracy",
    "erm_accuracy",
    "worst_expert_min_weight_rate",
    "n_evaluations",
)
GRADCHECK_COLUMNS = ("label", "max_rel_error", "n_checked", "fd_step", "tol", "passed")
# Bound audits are wide: one row per section, one column per reported term.
BOUNDS_SECTION_COLUMN = "section"


def dataset_columns(feature_dim: int) -> list:
    """domain_id,label,f0..f{D-1}"""
    return [DATASET_ID_COLUMN, DATASET_LABEL_COLUMN] + [
        f"{DATASET_FEATURE_PREFIX}{j}" for j in range(feature_dim)
    ]
