"""End-to-end hierarchical registration, training and synthetic scenes."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .engine import Tensor, no_grad, softmax
from .geometry import (PointCloud, RigidTransform, compose, random_subsample,
                       voxel_downsample)
from .features import (FeatureLayer, LayerConfig, default_layer_configs,
                       extract_pyramid, init_feature_layer)
from .matching import NeighborEncoder, compute_similarity, init_neighbor_encoder
from .correspondence import (CorrespondenceSet, build_coarse_clusters,
                             build_fine_clusters, correspondence_forward,
                             init_correspondence_net, normalize_confidence,
                             solve_weighted_kabsch, transform_points)
from .nn import AdamState, adam_step, load_weights, save_weights
from .spatial import knn_descriptor_batch

__all__ = [
    "ModelConfig", "RegistrationModel", "RegistrationResult",
    "SyntheticSceneConfig", "TrainConfig", "TrainingDiverged",
    "init_model", "save_model", "load_model",
    "coarse_register", "fine_register", "register", "loss",
    "generate_synthetic_pair", "make_pairs", "train",
    "nn_baseline_register", "evaluate_pairs",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and registration hyperparameters."""

    input_points: int = 1024
    voxel_size: float = 0.3
    candidate_count: int = 8
    neighbor_k: int = 8
    alpha: float = 1.8
    use_similarity: bool = True
    detach_solver: bool = False
    seed: int = 0
    keypoints: tuple = (256, 128, 64)
    channels: tuple = (64, 128, 256)
    cluster_size: int = 16

    def layer_configs(self):
        return tuple(LayerConfig(m, c, self.cluster_size)
                     for m, c in zip(self.keypoints, self.channels))


@dataclass
class RegistrationModel:
    """All learned weights plus the configuration they were built for."""

    config: ModelConfig
    feature_layers: list          # 3 FeatureLayer, shallowest first
    neighbor_encoder: NeighborEncoder
    correspondence_nets: list     # [coarse l3, fine l2, fine l1]

    def parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.feature_layers):
            out.update(layer.named_parameters(f"feat{i + 1}"))
        out.update(self.neighbor_encoder.named_parameters("nbr"))
        for name, net in zip(("corr3", "corr2", "corr1"),
                             self.correspondence_nets):
            out.update(net.named_parameters(name))
        return out


def _correspondence_widths(config: ModelConfig):
    geo = 10
    widths = []
    for li, c in ((2, config.channels[2]), (1, config.channels[1]),
                  (0, config.channels[0])):
        w = geo + 2 * c + 2
        if li == 2 and config.use_similarity:
            w += 4
        widths.append(w)
    return widths


def init_model(config: ModelConfig = None) -> RegistrationModel:
    config = config or ModelConfig()
    rng = np.random.default_rng(config.seed)
    layers = []
    prev_c = 0
    for i, lc in enumerate(config.layer_configs()):
        layers.append(init_feature_layer(lc, rng, in_descriptor_channels=prev_c,
                                         carries_input_state=i > 0))
        prev_c = lc.descriptor_channels
    encoder = init_neighbor_encoder(config.channels[2], rng,
                                    neighbor_count=config.neighbor_k)
    nets = [init_correspondence_net(w, rng)
            for w in _correspondence_widths(config)]
    return RegistrationModel(config, layers, encoder, nets)


def save_model(path, model: RegistrationModel):
    header = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    save_weights(path, model.parameters(), _extra_header=header)


def load_model(path) -> RegistrationModel:
    tensors, header = load_weights(path, _with_header=True)
    if header is None:
        raise ValueError("model file is missing its configuration header")
    raw = json.loads(header.decode("utf-8"))
    for key in ("keypoints", "channels"):
        raw[key] = tuple(raw[key])
    model = init_model(ModelConfig(**raw))
    params = model.parameters()
    if set(params) != set(tensors):
        raise ValueError("model file weights do not match the configuration")
    for name, p in params.items():
        if p.data.shape != tensors[name].shape:
            raise ValueError(f"shape mismatch for weight {name}")
        p.data = tensors[name]
    return model


# -- registration ----------------------------------------------------------


@dataclass
class RegistrationResult:
    """Per-layer transforms (coarse to fine), correspondences and timings."""

    layer3: RigidTransform
    layer2: RigidTransform
    layer1: RigidTransform
    deltas: list                  # [delta layer2, delta layer1]
    correspondences: list         # CorrespondenceSet per stage
    timings: dict

    @property
    def final(self) -> RigidTransform:
        return self.layer1


def _maybe_detach(model, r, t):
    if model.config.detach_solver:
        return r.detach(), t.detach()
    return r, t


def coarse_register(src_pyramid, tgt_pyramid, model: RegistrationModel):
    """Global descriptor-space registration on the deepest layer."""
    src, tgt = src_pyramid[2], tgt_pyramid[2]
    matrices = None
    if model.config.use_similarity:
        matrices = compute_similarity(src.keypoints, src.descriptors,
                                      tgt.keypoints, tgt.descriptors,
                                      model.neighbor_encoder)
    clusters = build_coarse_clusters(src, tgt, model.config.candidate_count,
                                     matrices)
    soft, conf, _ = correspondence_forward(clusters, model.correspondence_nets[0])
    weights = normalize_confidence(conf)
    r, t = solve_weighted_kabsch(clusters.centers, soft, weights)
    r, t = _maybe_detach(model, r, t)
    corr = CorrespondenceSet(clusters.centers.data.copy(), soft.data.copy(),
                             weights.data.copy())
    return (r, t), corr


def fine_register(src_layer, tgt_layer, prior, model: RegistrationModel,
                  level: int):
    """Local spatial refinement on layer `level` (2 or 1), composed with prior.

    Returns ((r, t) composed, (dr, dt) increment, correspondences).
    """
    pr, pt = prior
    net = model.correspondence_nets[1 if level == 2 else 2]
    clusters = build_fine_clusters(src_layer, tgt_layer, pr, pt,
                                   model.config.candidate_count)
    soft, conf, _ = correspondence_forward(clusters, net)
    weights = normalize_confidence(conf)
    dr, dt = solve_weighted_kabsch(clusters.centers, soft, weights)
    dr, dt = _maybe_detach(model, dr, dt)
    r = dr @ pr
    t = dr @ pt + dt
    corr = CorrespondenceSet(clusters.centers.data.copy(), soft.data.copy(),
                             weights.data.copy())
    return (r, t), (dr, dt), corr


def _registration_graph(src_pyr, tgt_pyr, model):
    """Full coarse-to-fine pass on extracted pyramids; stays differentiable."""
    coarse, corr3 = coarse_register(src_pyr, tgt_pyr, model)
    mid, d2, corr2 = fine_register(src_pyr[1], tgt_pyr[1], coarse, model, 2)
    top, d1, corr1 = fine_register(src_pyr[0], tgt_pyr[0], mid, model, 1)
    return coarse, mid, top, (d2, d1), [corr3, corr2, corr1]


def preprocess(cloud: PointCloud, model: RegistrationModel, seed: int,
               voxel_size=None) -> PointCloud:
    vs = model.config.voxel_size if voxel_size is None else voxel_size
    out = voxel_downsample(cloud, vs) if vs > 0 else cloud
    return random_subsample(out, model.config.input_points, seed)


def register(src: PointCloud, tgt: PointCloud, model: RegistrationModel,
             seed: int = 0, voxel_size=None) -> RegistrationResult:
    """Register two raw clouds; returns per-layer transforms and timings."""
    timings = {}
    t0 = time.perf_counter()
    src_p = preprocess(src, model, seed, voxel_size)
    tgt_p = preprocess(tgt, model, seed + 1, voxel_size)
    if len(src_p) < model.config.keypoints[0] or \
            len(tgt_p) < model.config.keypoints[0]:
        raise ValueError("too few points after preprocessing")
    timings["preprocess_ms"] = 1e3 * (time.perf_counter() - t0)

    t1 = time.perf_counter()
    with no_grad(model.parameters().values()):
        src_pyr = extract_pyramid(src_p, model.feature_layers, seed=seed)
        tgt_pyr = extract_pyramid(tgt_p, model.feature_layers, seed=seed)
        timings["extract_ms"] = 1e3 * (time.perf_counter() - t1)
        t2 = time.perf_counter()
        coarse, mid, top, deltas, corrs = _registration_graph(
            src_pyr, tgt_pyr, model)
    timings["register_ms"] = 1e3 * (time.perf_counter() - t2)
    timings["total_ms"] = 1e3 * (time.perf_counter() - t0)

    to_tf = lambda rt: RigidTransform(rt[0].data, rt[1].data)
    return RegistrationResult(to_tf(coarse), to_tf(mid), to_tf(top),
                              [to_tf(d) for d in deltas], corrs, timings)


def loss(estimate, truth: RigidTransform, alpha: float):
    """Translation + alpha * rotation loss; differentiable in the estimate.

    Rotation deviation uses the Frobenius norm of (R_est^T R_truth - I).
    """
    if isinstance(estimate, RigidTransform):
        est_r, est_t = Tensor(estimate.rotation), Tensor(estimate.translation)
    else:
        est_r, est_t = estimate
    l_trans = (est_t - Tensor(truth.translation)).norm(eps=1e-18)
    dev = est_r.T @ Tensor(truth.rotation) - Tensor(np.eye(3))
    l_rot = dev.norm(eps=1e-18)
    return l_trans + alpha * l_rot, l_trans, l_rot


# -- synthetic scenes ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Desk-scale stand-in for real outdoor scans."""

    point_count: int = 1024
    noise_sigma: float = 0.01
    overlap: float = 1.0
    yaw_range: float = 180.0
    tilt_range: float = 10.0
    translation_range: float = 5.0
    n_boxes: int = 6
    n_blobs: int = 8
    plane_fraction: float = 0.1
    extent: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.overlap <= 1.0):
            raise ValueError("overlap must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be nonnegative")


def _sample_scene(rng, n, cfg: SyntheticSceneConfig) -> np.ndarray:
    half = cfg.extent / 2.0
    n_plane = int(n * cfg.plane_fraction)
    rest = n - n_plane
    parts = []
    if n_plane:
        xy = rng.uniform(-half, half, size=(n_plane, 2))
        z = 0.02 * rng.standard_normal(n_plane)
        parts.append(np.column_stack([xy, z]))

    shapes = []
    for _ in range(cfg.n_boxes):
        center = np.append(rng.uniform(-0.8 * half, 0.8 * half, 2),
                           rng.uniform(0.3, 1.5))
        size = rng.uniform(0.5, 2.0, size=3)
        yaw = rng.uniform(0, 2 * np.pi)
        shapes.append(("box", center, size, yaw))
    for _ in range(cfg.n_blobs):
        center = np.append(rng.uniform(-0.8 * half, 0.8 * half, 2),
                           rng.uniform(0.2, 2.0))
        sigma = rng.uniform(0.15, 0.5)
        shapes.append(("blob", center, sigma, 0.0))

    if shapes:
        counts = np.full(len(shapes), rest // len(shapes))
        counts[:rest - counts.sum()] += 1
        for (kind, center, size, yaw), cnt in zip(shapes, counts):
            if cnt == 0:
                continue
            if kind == "box":
                face = rng.integers(0, 3, size=cnt)
                side = rng.choice([-0.5, 0.5], size=cnt)
                p = rng.uniform(-0.5, 0.5, size=(cnt, 3))
                p[np.arange(cnt), face] = side
                p *= size
                c, s = np.cos(yaw), np.sin(yaw)
                rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
                parts.append(p @ rot.T + center)
            else:
                parts.append(center + size * rng.standard_normal((cnt, 3)))
    return np.concatenate(parts, axis=0)


def _random_truth(rng, cfg: SyntheticSceneConfig) -> RigidTransform:
    yaw = rng.uniform(-cfg.yaw_range, cfg.yaw_range)
    pitch = rng.uniform(-cfg.tilt_range, cfg.tilt_range)
    roll = rng.uniform(-cfg.tilt_range, cfg.tilt_range)
    rz = RigidTransform.from_axis_angle([0, 0, 1], yaw).rotation
    ry = RigidTransform.from_axis_angle([0, 1, 0], pitch).rotation
    rx = RigidTransform.from_axis_angle([1, 0, 0], roll).rotation
    t = rng.uniform(-cfg.translation_range, cfg.translation_range, size=3)
    return RigidTransform(rz @ ry @ rx, t)


def generate_synthetic_pair(cfg: SyntheticSceneConfig):
    """Two overlapping views of one scene plus the ground-truth transform.

    The target view is the transformed (and independently cropped) scene;
    registering source onto target should recover the returned transform.
    """
    rng = np.random.default_rng(cfg.seed)
    keep = 1.0 / (2.0 - cfg.overlap)  # per-view keep fraction for the overlap
    n_scene = int(np.ceil(cfg.point_count / keep * 1.3)) + 256
    scene = _sample_scene(rng, n_scene, cfg)
    truth = _random_truth(rng, cfg)

    phi = rng.uniform(0, 2 * np.pi)
    u = np.array([np.cos(phi), np.sin(phi)])
    proj = scene[:, :2] @ u
    if cfg.overlap >= 1.0:
        src_sel = np.arange(scene.shape[0])
        tgt_sel = src_sel
    else:
        lo = np.quantile(proj, keep)
        hi = np.quantile(proj, 1.0 - keep)
        src_sel = np.flatnonzero(proj <= lo)
        tgt_sel = np.flatnonzero(proj >= hi)

    sub_seed = int(rng.integers(2 ** 63))
    noise_rng = np.random.default_rng(int(rng.integers(2 ** 63)))

    def view(sel):
        pts = PointCloud(scene[sel])
        return random_subsample(pts, cfg.point_count, sub_seed).points

    src_pts = view(src_sel)
    tgt_pts = truth.apply(view(tgt_sel))
    if cfg.noise_sigma > 0:
        src_pts = src_pts + cfg.noise_sigma * noise_rng.standard_normal(src_pts.shape)
        tgt_pts = tgt_pts + cfg.noise_sigma * noise_rng.standard_normal(tgt_pts.shape)
    return PointCloud(src_pts), PointCloud(tgt_pts), truth


def make_pairs(count, base_seed, point_count=1024, noise_sigma=0.01,
               overlap_range=(0.7, 1.0), **kwargs):
    """Deterministic list of (src, tgt, truth) synthetic pairs."""
    out = []
    for i in range(count):
        rng = np.random.default_rng((base_seed, i))
        ov = float(rng.uniform(*overlap_range))
        cfg = SyntheticSceneConfig(point_count=point_count,
                                   noise_sigma=noise_sigma, overlap=ov,
                                   seed=int(rng.integers(2 ** 31)), **kwargs)
        out.append(generate_synthetic_pair(cfg))
    return out


# -- training --------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    pretrain_epochs: int = 30
    freeze_features: bool = True
    pairs_per_epoch: int = 192
    batch_pairs: int = 8
    lr: float = 1e-3
    lr_halve_every: int = 10
    seed: int = 0
    point_count: int = 1024
    noise_sigma: float = 0.01
    overlap_range: tuple = (0.7, 1.0)
    probe_pairs: int = 4
    contrastive_temperature: float = 0.1
    positive_radius: float = 0.5
    grad_clip: float = 1.0


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the last good model."""

    def __init__(self, message, model, history):
        super().__init__(message)
        self.model = model
        self.history = history


def _matching_cross_entropy(ds, dt, pos_cols, temperature):
    """Softmax-over-similarities loss for unit descriptors ds vs the bank dt."""
    sims = (ds @ dt.T) * (1.0 / temperature)        # (P, M)
    probs = softmax(sims, axis=1)
    picked = probs[np.arange(len(pos_cols)), pos_cols]
    return -((picked + 1e-12).log().mean())


def _layer_contrastive_loss(src, tgt, truth, cfg: TrainConfig):
    src_kp = src.keypoints.data
    moved = truth.apply(src_kp)
    idx, dist = knn_descriptor_batch(tgt.keypoints.data, moved, 1)
    pos_rows = np.flatnonzero(dist[:, 0] <= cfg.positive_radius)
    if pos_rows.size == 0:
        return Tensor(0.0)
    pos_cols = idx[pos_rows, 0]
    fwd = _matching_cross_entropy(src.descriptors[pos_rows], tgt.descriptors,
                                  pos_cols, cfg.contrastive_temperature)
    bwd = _matching_cross_entropy(tgt.descriptors[pos_cols], src.descriptors,
                                  pos_rows, cfg.contrastive_temperature)
    return (fwd + bwd) * 0.5


def _descriptor_contrastive_loss(src_pyr, tgt_pyr, truth, cfg: TrainConfig):
    """Contrastive loss tying ground-truth-corresponding descriptors together.

    For every layer, each source keypoint whose truth-moved position has a
    target keypoint within `positive_radius` must rank that keypoint first
    under cosine similarity, scored with a softmax cross-entropy over all
    targets of the layer (and symmetrically for the backward direction).
    """
    total = Tensor(0.0)
    for src, tgt in zip(src_pyr.layers, tgt_pyr.layers):
        total = total + _layer_contrastive_loss(src, tgt, truth, cfg)
    return total


def _correspondence_supervision_loss(model, src_pyr, tgt_pyr, truth,
                                     cfg: TrainConfig):
    """Ground-truth supervision for the attention and confidence heads.

    For every cluster the attention gets a cross-entropy toward the set
    of candidates within `positive_radius` of the truth-moved center
    (several candidates can be valid at once, so a single-candidate
    target would force the optimum to stay soft), and the confidence
    head a binary cross-entropy on whether the cluster contains any
    valid candidate — clusters whose candidate set misses the true
    counterpart produce garbage soft targets and must be suppressed.  The fine layers are built with the ground truth
    as prior, so all three correspondence nets see clusters shaped like
    the ones they meet at inference time.
    """
    rot, tr = Tensor(truth.rotation), Tensor(truth.translation)
    matrices = None
    if model.config.use_similarity:
        matrices = compute_similarity(src_pyr[2].keypoints,
                                      src_pyr[2].descriptors,
                                      tgt_pyr[2].keypoints,
                                      tgt_pyr[2].descriptors,
                                      model.neighbor_encoder)
    stages = [(2, model.correspondence_nets[0],
               build_coarse_clusters(src_pyr[2], tgt_pyr[2],
                                     model.config.candidate_count, matrices))]
    for li, net in ((1, model.correspondence_nets[1]),
                    (0, model.correspondence_nets[2])):
        stages.append((li, net,
                       build_fine_clusters(src_pyr[li], tgt_pyr[li], rot, tr,
                                           model.config.candidate_count)))
    total = Tensor(0.0)
    for li, net, clusters in stages:
        _, conf, attn = correspondence_forward(clusters, net)
        moved = truth.apply(src_pyr[li].keypoints.data)
        tgt_kp = tgt_pyr[li].keypoints.data
        cand = tgt_kp[clusters.candidate_indices]               # (M, K, 3)
        d = np.linalg.norm(cand - moved[:, None], axis=2)       # (M, K)
        valid = d <= cfg.positive_radius                        # (M, K)
        rows = np.flatnonzero(valid.any(axis=1))
        if rows.size:
            mass = (attn * Tensor(valid.astype(float))).sum(axis=1)
            total = total - (mass[rows] + 1e-12).log().mean()
        label = valid.any(axis=1).astype(float)
        bce = (conf + 1e-12).log() * Tensor(label) \
            + ((1.0 - conf) + 1e-12).log() * Tensor(1.0 - label)
        total = total - bce.mean()
    return total


def _pair_loss(model, src, tgt, truth, cfg: TrainConfig, pretrain: bool,
               seed: int):
    # train on clouds preprocessed exactly like register() preprocesses
    # them, otherwise the voxel-downsampled inference distribution is
    # never seen during training
    src = preprocess(src, model, seed)
    tgt = preprocess(tgt, model, seed + 1)
    src_pyr = extract_pyramid(src, model.feature_layers, seed=seed)
    tgt_pyr = extract_pyramid(tgt, model.feature_layers, seed=seed)
    if pretrain:
        l = _descriptor_contrastive_loss(src_pyr, tgt_pyr, truth, cfg) \
            + _correspondence_supervision_loss(model, src_pyr, tgt_pyr,
                                               truth, cfg)
        return l, l, Tensor(0.0), Tensor(0.0)
    coarse, mid, top, _, _ = _registration_graph(src_pyr, tgt_pyr, model)
    total, lt, lr = Tensor(0.0), Tensor(0.0), Tensor(0.0)
    for est in (coarse, mid, top):
        l, a, b = loss(est, truth, model.config.alpha)
        total, lt, lr = total + l, lt + a, lr + b
    return total, total, lt, lr


def _collect_grads(params):
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def _clip_grads(grads: dict, max_norm: float):
    """Scale the gradient dict down to a global norm of `max_norm`."""
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {name: g * scale for name, g in grads.items()}
    return grads


def train(model: RegistrationModel, cfg: TrainConfig = None, progress=None):
    """Two-phase training: supervised pre-training, then registration loss.

    The pre-training phase combines the descriptor contrastive loss with
    direct attention/confidence supervision; the second phase minimizes
    the per-layer transform loss with the feature stack frozen (see
    TrainConfig.freeze_features).  Returns (model, history) where history
    has one row per epoch with the mean batch losses and the loss on a
    frozen probe batch.
    """
    cfg = cfg or TrainConfig()
    probe = make_pairs(cfg.probe_pairs, cfg.seed + 2,
                       point_count=cfg.point_count,
                       noise_sigma=cfg.noise_sigma,
                       overlap_range=cfg.overlap_range)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        pretrain = epoch < cfg.pretrain_epochs
        if epoch == cfg.pretrain_epochs:
            state = AdamState(lr=cfg.lr)  # fresh moments for the new objective
        state.lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
        # the registration loss cannot see the discrete candidate
        # selection, so letting it update the descriptor stack destroys
        # the kNN candidate ranking; features stay frozen after pretraining
        if pretrain or not cfg.freeze_features:
            stepped = params
        else:
            stepped = {k: v for k, v in params.items()
                       if not k.startswith("feat")}

        # fresh scenes every epoch; reusing one batch of scenes overfits
        dataset = make_pairs(cfg.pairs_per_epoch,
                             cfg.seed + 1 + 1000003 * epoch,
                             point_count=cfg.point_count,
                             noise_sigma=cfg.noise_sigma,
                             overlap_range=cfg.overlap_range)
        sums = np.zeros(3)
        nb = 0
        for start in range(0, len(dataset), cfg.batch_pairs):
            batch = dataset[start:start + cfg.batch_pairs]
            grads = {}
            batch_loss = np.zeros(3)
            for pi, (src, tgt, truth) in enumerate(batch):
                for p in params.values():
                    p.zero_grad()
                total, l, lt, lr = _pair_loss(model, src, tgt, truth, cfg,
                                              pretrain, seed=cfg.seed)
                if not np.isfinite(total.data):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}", model, history)
                total.backward()
                for name, g in _collect_grads(stepped).items():
                    grads[name] = grads.get(name, 0.0) + g / len(batch)
                batch_loss += [float(l.data), float(lt.data), float(lr.data)]
            adam_step(stepped, _clip_grads(grads, cfg.grad_clip), state)
            sums += batch_loss / len(batch)
            nb += 1

        with no_grad(params.values()):
            probe_loss = 0.0
            for src, tgt, truth in probe:
                _, l, _, _ = _pair_loss(model, src, tgt, truth, cfg,
                                        pretrain=False, seed=cfg.seed)
                probe_loss += float(l.data) / len(probe)
        row = {"epoch": epoch, "phase": "pretrain" if pretrain else "full",
               "loss": sums[0] / nb, "loss_trans": sums[1] / nb,
               "loss_rot": sums[2] / nb, "probe_loss": probe_loss}
        history.append(row)
        if progress is not None:
            progress(row)
    return model, history


# -- evaluation helpers ----------------------------------------------------


def nn_baseline_register(src: PointCloud, tgt: PointCloud,
                         model: RegistrationModel, seed: int = 0):
    """Mutual-NN descriptor matching + unweighted Kabsch on the deep layer.

    Returns a RigidTransform, or None when fewer than 3 mutual matches
    survive.
    """
    with no_grad(model.parameters().values()):
        src_p = preprocess(src, model, seed)
        tgt_p = preprocess(tgt, model, seed + 1)
        src_pyr = extract_pyramid(src_p, model.feature_layers, seed=seed)
        tgt_pyr = extract_pyramid(tgt_p, model.feature_layers, seed=seed)
    ds = src_pyr[2].descriptors.data
    dt = tgt_pyr[2].descriptors.data
    fwd, _ = knn_descriptor_batch(dt, ds, 1)
    bwd, _ = knn_descriptor_batch(ds, dt, 1)
    rows = np.flatnonzero(bwd[fwd[:, 0], 0] == np.arange(ds.shape[0]))
    if rows.size < 3:
        return None
    cols = fwd[rows, 0]
    r, t = solve_weighted_kabsch(src_pyr[2].keypoints.data[rows],
                                 tgt_pyr[2].keypoints.data[cols],
                                 np.ones(rows.size))
    return RigidTransform(r.data, t.data)


def evaluate_pairs(model, pairs, seed: int = 0):
    """Register each (src, tgt, truth) pair; returns RegistrationResult list."""
    return [register(src, tgt, model, seed=seed)
            for src, tgt, _ in pairs]
