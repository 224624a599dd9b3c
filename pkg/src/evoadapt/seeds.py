"""Initial algorithms used to seed the search population.

Each seed carries the published description of the classic method as its
thoughts, and code that works on both execution routes: the first line is a
``#native:`` directive for the in-process backend, the body is plain tensor
code the sandbox worker executes verbatim.  The two routes must agree
numerically; the native reference formulas live in :mod:`evoadapt.adaptation`.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidCombination

STAGES = ("feature_selection", "logits_computation", "joint")
INIT_CHOICES = ("tip_adapter", "ape", "gda", "none")


@dataclass(frozen=True)
class SeedAlgorithm:
    stage: str
    init: str
    thoughts: str
    code: str


APE_FS_THOUGHTS = (
    "The feature selection algorithm defines a criterion that aims to extract "
    "the feature channels that minimize the inter-class similarity of the "
    "concatenated features of visual and category textual features, but "
    "maximize the variance of category textual features."
)

APE_LOGITS_THOUGHTS = (
    "The algorithm sums up two logits: the logits generated by zero-shot "
    "classifier and the logits generated by a cache model. The first logits "
    "are computed by applying linear transformation to test features. The "
    "second logits are obtained by first computing the similarity matrix "
    "between test and train features and then multiplying the transformed "
    "similarity matrix to soft train label matrix. While computing "
    "image-image similarity, selected feature channels are used."
)

TIP_LOGITS_THOUGHTS = (
    "The algorithm sums up two logits: the logits generated by zero-shot "
    "classifier and the logits generated by a cache model. The first logits "
    "are computed by applying linear transformation to test features. The "
    "second logits are obtained by first computing the similarity matrix "
    "between test and train features and then multiplying the transformed "
    "similarity matrix to train label matrix."
)

GDA_LOGITS_THOUGHTS = (
    "The logits consist of two parts: the logits computed by CLIP's zero-shot "
    "classifier and the logits computed by Gaussian Discriminant Analysis "
    "(GDA) model. In each part, all feature channels are used. GDA is a "
    "probabilistic generative model for classification that assumes all "
    "classes are generated by Gaussian distributions with a common covariance "
    "matrix but different mean vectors. GDA first computes per-class mean "
    "vector and then estimates the inverted covariance matrix. After that the "
    "weight and bias of the GDA classifier can be computed."
)

ZERO_SHOT_THOUGHTS = (
    "The algorithm returns the zero-shot logits obtained by applying a linear "
    "transformation of the class text embeddings to the test features."
)


APE_FS_CODE = '''\
#native: select:ape
def feat_selection(clip_weights, train_feats, w0, w1, topk):
    num_classes = clip_weights.shape[1]
    shots = train_feats.shape[0] // num_classes
    class_means = train_feats.reshape(num_classes, shots, -1).mean(dim=1)
    text = clip_weights.t()
    var_text = text.var(dim=0, unbiased=False)

    def offdiag_mean(m):
        total = m.sum(dim=0) ** 2 - (m ** 2).sum(dim=0)
        return total / (num_classes * (num_classes - 1))

    score = w1 * var_text - w0 * (offdiag_mean(class_means) + offdiag_mean(text))
    order = torch.argsort(-score, stable=True)[:topk]
    return torch.sort(order).values
'''

TIP_LOGITS_CODE = '''\
#native: logits:tip
def compute_logits(train_feats, train_labels, test_feats, clip_weights,
                   indices, alpha0, alpha1, alpha2):
    zero_shot = 100.0 * test_feats @ clip_weights
    affinity = torch.exp(-alpha1 * (1.0 - test_feats @ train_feats.t()))
    one_hot = F.one_hot(train_labels).to(affinity.dtype)
    return zero_shot + alpha0 * affinity @ one_hot
'''

APE_LOGITS_CODE = '''\
#native: logits:ape
def compute_logits(train_feats, train_labels, test_feats, clip_weights,
                   indices, alpha0, alpha1, alpha2):
    zero_shot = 100.0 * test_feats @ clip_weights
    sub_test = test_feats[:, indices]
    sub_train = train_feats[:, indices]
    sub_test = sub_test / sub_test.norm(dim=1, keepdim=True)
    sub_train = sub_train / sub_train.norm(dim=1, keepdim=True)
    affinity = torch.exp(-alpha1 * (1.0 - sub_test @ sub_train.t()))
    confidence = torch.exp(alpha2 * ((train_feats * clip_weights.t()[train_labels]).sum(dim=1) - 1.0))
    soft_labels = F.one_hot(train_labels).to(affinity.dtype) * confidence.unsqueeze(1)
    return zero_shot + alpha0 * affinity @ soft_labels
'''

GDA_LOGITS_CODE = '''\
#native: logits:gda
def compute_logits(train_feats, train_labels, test_feats, clip_weights,
                   indices, alpha0, alpha1, alpha2):
    num_classes = clip_weights.shape[1]
    d = train_feats.shape[1]
    zero_shot = 100.0 * test_feats @ clip_weights
    means = torch.stack([train_feats[train_labels == c].mean(dim=0)
                         for c in range(num_classes)])
    resid = train_feats - means[train_labels]
    cov = resid.t() @ resid / train_feats.shape[0]
    eps = 1e-4 * torch.diagonal(cov).mean() + 1e-8
    precision = torch.linalg.inv(cov + eps * torch.eye(d))
    weight = precision @ means.t()
    bias = math.log(1.0 / num_classes) - 0.5 * (means.t() * weight).sum(dim=0)
    return zero_shot + alpha0 * (test_feats @ weight + bias)
'''

ZERO_SHOT_CODE = '''\
#native: logits:zero_shot
def compute_logits(train_feats, train_labels, test_feats, clip_weights,
                   indices, alpha0, alpha1, alpha2):
    return 100.0 * test_feats @ clip_weights
'''

FIRST_K_THOUGHTS = "The algorithm keeps the first topk feature channels unchanged."

FIRST_K_CODE = '''\
#native: select:first
def feat_selection(clip_weights, train_feats, w0, w1, topk):
    return torch.arange(topk)
'''


def _joint_code(directive: str, logits_body: str) -> str:
    # strip the inner directive line and rename the logits entry point
    inner = logits_body.split("\n", 1)[1].replace(
        "def compute_logits(", "def compute_logits_with_fs(", 1
    )
    fs_body = APE_FS_CODE.split("\n", 1)[1]
    wrapper = (
        "def compute_logits(train_feats, train_labels, test_feats, clip_weights,\n"
        "                   w0, w1, topk, alpha0, alpha1, alpha2):\n"
        "    indices = feat_selection(clip_weights, train_feats, w0, w1, topk)\n"
        "    return compute_logits_with_fs(train_feats, train_labels, test_feats,\n"
        "                                  clip_weights, indices, alpha0, alpha1, alpha2)\n"
    )
    return f"#native: {directive}\n{fs_body}\n\n{inner}\n\n{wrapper}"


def _joint_thoughts(logits_thoughts: str) -> str:
    return (
        "The algorithm consists of two steps: 1) selecting important feature "
        "channels that minimize the inter-class similarity of concatenated "
        "visual and textual features while maximizing the variance of textual "
        "features; 2) computing classification logits with the selected "
        "channels. For the second step: " + logits_thoughts
    )


_LOGITS_SEEDS = {
    "tip_adapter": (TIP_LOGITS_THOUGHTS, TIP_LOGITS_CODE),
    "ape": (APE_LOGITS_THOUGHTS, APE_LOGITS_CODE),
    "gda": (GDA_LOGITS_THOUGHTS, GDA_LOGITS_CODE),
}

_JOINT_DIRECTIVE = {"tip_adapter": "joint:tip", "ape": "joint:ape", "gda": "joint:gda"}


def initial_algorithm(stage: str, init: str) -> SeedAlgorithm:
    """The seed for a (stage, init) pair; only APE provides feature selection."""
    if stage not in STAGES:
        raise InvalidCombination(f"unknown stage {stage!r}")
    if init not in INIT_CHOICES or init == "none":
        raise InvalidCombination(f"unknown init {init!r}")
    if stage == "feature_selection":
        if init != "ape":
            raise InvalidCombination(f"{init!r} has no feature selection algorithm")
        return SeedAlgorithm(stage, init, APE_FS_THOUGHTS, APE_FS_CODE)
    if stage == "logits_computation":
        thoughts, code = _LOGITS_SEEDS[init]
        return SeedAlgorithm(stage, init, thoughts, code)
    thoughts, code = _LOGITS_SEEDS[init]
    return SeedAlgorithm(stage, init,
                         _joint_thoughts(thoughts),
                         _joint_code(_JOINT_DIRECTIVE[init], code))


def stage_stub(stage: str) -> SeedAlgorithm:
    """Minimal template used when a search starts without an initial algorithm:
    zero-shot logits, or pass-through selection for the selection stage."""
    if stage == "feature_selection":
        return SeedAlgorithm(stage, "none", FIRST_K_THOUGHTS, FIRST_K_CODE)
    return SeedAlgorithm(stage, "none", ZERO_SHOT_THOUGHTS, ZERO_SHOT_CODE)
