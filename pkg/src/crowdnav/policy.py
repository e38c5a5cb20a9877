"""Structured attention policy over humans, obstacles and the robot.

Three masked attention stages process the detected humans: an 8-head
human-human stage, a single-head obstacle-human stage keyed by a 1D-CNN
embedding of the range scan, and a single-head robot-human stage keyed by
a linear robot embedding that collapses the humans to one vector.  The
robot embedding, obstacle embedding and collapsed human vector feed a GRU
whose hidden state drives the value and action heads.

Ablation stages: ``rh`` keeps only the robot-human block (human states
projected straight into its queries/values), ``rh_oh`` drops the
human-human block, ``rh_hh_oh`` is the full network.  Parameter shapes
never depend on how many humans are present.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensorcore as tc

__all__ = ["PolicyConfig", "PolicyNetwork", "PolicyOutput", "featurize", "STAGES"]

STAGES = ("rh", "rh_oh", "rh_hh_oh")

HUMAN_DIM = 4
ROBOT_DIM = 7


@dataclass(frozen=True)
class PolicyConfig:
    d_hh: int = 64
    d_oh: int = 64
    d_rh: int = 64
    heads_hh: int = 8
    gru_hidden: int = 128
    conv_channels: tuple = (8, 16)
    conv_kernel: int = 5
    conv_stride: int = 2
    n_max_humans: int = 6
    action_count: int = 9
    num_beams: int = 180
    stages: str = "rh_hh_oh"

    def __post_init__(self):
        if self.d_hh % self.heads_hh != 0:
            raise ValueError(f"d_hh {self.d_hh} not divisible by {self.heads_hh} heads")
        if self.stages not in STAGES:
            raise ValueError(f"stages must be one of {STAGES}, got {self.stages!r}")

    @property
    def head_dim(self):
        return self.d_hh // self.heads_hh

    @property
    def gru_input_dim(self):
        # robot embedding + obstacle embedding + collapsed humans + no-humans flag
        return self.d_rh + self.d_oh + self.d_rh + 1

    def conv_output_length(self):
        length = self.num_beams
        for _ in self.conv_channels:
            length = (length - self.conv_kernel) // self.conv_stride + 1
            if length <= 0:
                raise ValueError("scan too short for the conv stack")
        return length

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(d["conv_channels"])
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "conv_channels" in data:
            data["conv_channels"] = tuple(data["conv_channels"])
        return cls(**data)


@dataclass
class PolicyOutput:
    value: tc.Tensor  # (B, 1)
    action_logits: tc.Tensor  # (B, action_count)
    new_hidden: tc.Tensor  # (B, gru_hidden)
    attention: dict = field(default_factory=dict)  # numpy arrays, inspection only


def featurize(obs, arena_half_width, max_range):
    """Observation -> network inputs; positions scaled by the arena half
    width, scan by its max range.  Masked slots stay exactly zero."""
    robot_feat = obs.robot.feature_vector(pos_scale=arena_half_width)
    human_feat = obs.human_slots.copy()
    human_feat[:, 0:2] /= arena_half_width
    scan_feat = obs.scan.ranges / max_range
    return robot_feat, human_feat, obs.visibility_mask.copy(), scan_feat


class PolicyNetwork:
    """Parameter container plus the batched forward pass."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or PolicyConfig()
        self.dtype = np.dtype(dtype)
        self.params = tc.ParamStore()
        self._build(np.random.default_rng([seed, 0xC0FFEE]))

    # -- parameters -----------------------------------------------------------

    def _matrix(self, rng, name, d_in, d_out):
        self.params.add(name, tc.uniform_init(rng, (d_in, d_out), d_in, d_out, self.dtype))

    def _linear(self, rng, name, d_in, d_out):
        self._matrix(rng, f"{name}/w", d_in, d_out)
        self.params.add(f"{name}/b", np.zeros(d_out, dtype=self.dtype))

    def _build(self, rng):
        cfg = self.config
        full = cfg.stages == "rh_hh_oh"
        with_oh = cfg.stages in ("rh_oh", "rh_hh_oh")
        if full:
            for proj in ("q", "k", "v"):
                self._matrix(rng, f"hh/w_{proj}", HUMAN_DIM, cfg.d_hh)
            self._matrix(rng, "hh/w_o", cfg.d_hh, cfg.d_hh)
        # obstacle embedding CNN (all stages: the embedding always feeds the GRU)
        c_prev = 1
        for i, c_out in enumerate(cfg.conv_channels):
            k = cfg.conv_kernel
            self.params.add(
                f"cnn/conv{i}/w",
                tc.uniform_init(rng, (c_out, c_prev, k), c_prev * k, c_out * k, self.dtype),
            )
            self.params.add(f"cnn/conv{i}/b", np.zeros(c_out, dtype=self.dtype))
            c_prev = c_out
        flat = cfg.conv_channels[-1] * cfg.conv_output_length()
        self._linear(rng, "cnn/out", flat, cfg.d_oh)
        if with_oh:
            d_in = cfg.d_hh if full else HUMAN_DIM
            self._matrix(rng, "oh/w_q", d_in, cfg.d_oh)
            self._matrix(rng, "oh/w_k", cfg.d_oh, cfg.d_oh)
            self._matrix(rng, "oh/w_v", d_in, cfg.d_oh)
        self._linear(rng, "robot_embed", ROBOT_DIM, cfg.d_rh)
        d_in = cfg.d_oh if with_oh else HUMAN_DIM
        self._matrix(rng, "rh/w_q", d_in, cfg.d_rh)
        self._matrix(rng, "rh/w_v", d_in, cfg.d_rh)
        d_x, d_h = cfg.gru_input_dim, cfg.gru_hidden
        for gate in ("r", "z", "n"):
            self.params.add(f"gru/w_x{gate}", tc.uniform_init(rng, (d_x, d_h), d_x, d_h, self.dtype))
            self.params.add(f"gru/w_h{gate}", tc.uniform_init(rng, (d_h, d_h), d_h, d_h, self.dtype))
            self.params.add(f"gru/b_{gate}", np.zeros(d_h, dtype=self.dtype))
        self._linear(rng, "value_head", d_h, 1)
        self._linear(rng, "policy_head", d_h, cfg.action_count)

    def parameter_count(self):
        return self.params.count()

    def zero_hidden(self, batch):
        return np.zeros((batch, self.config.gru_hidden), dtype=self.dtype)

    def _gru_params(self):
        p = self.params
        return {
            "w_xr": p["gru/w_xr"], "w_hr": p["gru/w_hr"], "b_r": p["gru/b_r"],
            "w_xz": p["gru/w_xz"], "w_hz": p["gru/w_hz"], "b_z": p["gru/b_z"],
            "w_xn": p["gru/w_xn"], "w_hn": p["gru/w_hn"], "b_n": p["gru/b_n"],
        }

    # -- stages ----------------------------------------------------------------

    def hh_attention(self, humans, mask):
        """Multi-head masked self-attention over human slots; masked rows are
        zero on both the query and key sides."""
        cfg = self.config
        p = self.params
        q = tc.matmul(humans, p["hh/w_q"])
        k = tc.matmul(humans, p["hh/w_k"])
        v = tc.matmul(humans, p["hh/w_v"])
        hd = cfg.head_dim
        key_mask = mask[:, None, :]  # broadcast over query rows
        heads = []
        weights = []
        for h in range(cfg.heads_hh):
            lo, hi = h * hd, (h + 1) * hd
            qh, kh, vh = q[:, :, lo:hi], k[:, :, lo:hi], v[:, :, lo:hi]
            scores = tc.scale(tc.matmul(qh, tc.transpose_last2(kh)), 1.0 / math.sqrt(hd))
            attn = tc.masked_softmax(scores, key_mask)
            heads.append(tc.matmul(attn, vh))
            weights.append(attn.data)
        merged = tc.matmul(tc.concat(heads, axis=-1), p["hh/w_o"])
        out = tc.mul(merged, mask[:, :, None].astype(self.dtype))
        return out, np.stack(weights, axis=1)

    def obstacle_embed(self, scan):
        """Normalized scan -> d_oh embedding through the 1D conv stack."""
        cfg = self.config
        if scan.shape[-1] != cfg.num_beams:
            raise ValueError(f"expected {cfg.num_beams} beams, got {scan.shape[-1]}")
        p = self.params
        x = tc.reshape(scan, (scan.shape[0], 1, cfg.num_beams))
        for i in range(len(cfg.conv_channels)):
            x = tc.relu(tc.conv1d(x, p[f"cnn/conv{i}/w"], p[f"cnn/conv{i}/b"], cfg.conv_stride))
        flat = tc.reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))
        return tc.add(tc.matmul(flat, p["cnn/out/w"]), p["cnn/out/b"])

    def oh_attention(self, human_features, obstacle_embedding, mask, n_vis):
        """Per-human scores against the single obstacle key; rows are scaled
        by n_vis * weight so a uniform distribution leaves them unchanged."""
        cfg = self.config
        p = self.params
        batch = human_features.shape[0]
        q = tc.matmul(human_features, p["oh/w_q"])
        v = tc.matmul(human_features, p["oh/w_v"])
        key = tc.matmul(obstacle_embedding, p["oh/w_k"])  # (B, d_oh)
        logits = tc.matmul(q, tc.reshape(key, (batch, cfg.d_oh, 1)))
        logits = tc.scale(tc.reshape(logits, (batch, q.shape[1])), 1.0 / math.sqrt(cfg.d_oh))
        weights = tc.masked_softmax(logits, mask)
        scaled = tc.mul(weights, n_vis[:, None].astype(self.dtype))
        out = tc.mul(v, tc.reshape(scaled, (batch, q.shape[1], 1)))
        return out, weights.data

    def rh_attention(self, human_features, robot_embedding, mask):
        """Single-head attention keyed by the robot embedding; collapses the
        per-human features into one vector."""
        cfg = self.config
        p = self.params
        batch = human_features.shape[0]
        q = tc.matmul(human_features, p["rh/w_q"])
        v = tc.matmul(human_features, p["rh/w_v"])
        logits = tc.matmul(q, tc.reshape(robot_embedding, (batch, cfg.d_rh, 1)))
        logits = tc.scale(tc.reshape(logits, (batch, q.shape[1])), 1.0 / math.sqrt(cfg.d_rh))
        weights = tc.masked_softmax(logits, mask)
        pooled = tc.matmul(tc.reshape(weights, (batch, 1, q.shape[1])), v)
        return tc.reshape(pooled, (batch, cfg.d_rh)), weights.data

    # -- forward ----------------------------------------------------------------

    def forward(self, robot_feat, human_feat, mask, scan_feat, hidden):
        """Batched forward pass.

        robot_feat (B, 7), human_feat (B, n_max, 4), mask (B, n_max),
        scan_feat (B, num_beams) already normalized, hidden (B, gru_hidden)
        as array or tensor (pass a tensor to chain gradients through time).
        """
        cfg = self.config
        p = self.params
        robot_feat = np.asarray(robot_feat, dtype=self.dtype)
        human_feat = np.asarray(human_feat, dtype=self.dtype)
        mask = np.asarray(mask, dtype=self.dtype)
        scan_feat = np.asarray(scan_feat, dtype=self.dtype)
        if robot_feat.ndim == 1:
            robot_feat, human_feat = robot_feat[None], human_feat[None]
            mask, scan_feat = mask[None], scan_feat[None]
        if not isinstance(hidden, tc.Tensor):
            hidden = tc.Tensor(np.asarray(hidden, dtype=self.dtype))
        attention = {}
        n_vis = mask.sum(axis=-1)

        humans = tc.Tensor(human_feat)
        v_o = self.obstacle_embed(tc.Tensor(scan_feat))
        robot_key = tc.add(tc.matmul(tc.Tensor(robot_feat), p["robot_embed/w"]), p["robot_embed/b"])

        if cfg.stages == "rh_hh_oh":
            v_hh, attention["hh"] = self.hh_attention(humans, mask)
            v_oh, attention["oh"] = self.oh_attention(v_hh, v_o, mask, n_vis)
            rh_input = v_oh
        elif cfg.stages == "rh_oh":
            v_oh, attention["oh"] = self.oh_attention(humans, v_o, mask, n_vis)
            rh_input = v_oh
        else:
            rh_input = humans
        v_rh, attention["rh"] = self.rh_attention(rh_input, robot_key, mask)

        flag = (n_vis == 0).astype(self.dtype)[:, None]
        gru_in = tc.concat([robot_key, v_o, v_rh, tc.Tensor(flag)], axis=-1)
        new_hidden = tc.gru_cell(gru_in, hidden, self._gru_params())
        value = tc.add(tc.matmul(new_hidden, p["value_head/w"]), p["value_head/b"])
        logits = tc.add(tc.matmul(new_hidden, p["policy_head/w"]), p["policy_head/b"])
        return PolicyOutput(value, logits, new_hidden, attention)

    # -- persistence -------------------------------------------------------------

    def state_meta(self):
        return {"policy_config": self.config.to_dict()}

    def save(self, path, extra_meta=None):
        meta = self.state_meta()
        if extra_meta:
            meta.update(extra_meta)
        tc.save_tensors(path, {name: t.data for name, t in self.params.items()}, meta)

    @classmethod
    def load(cls, path, dtype=np.float32):
        arrays, meta = tc.load_tensors(path)
        if "policy_config" not in meta:
            raise tc.CheckpointError("checkpoint is missing the policy config")
        net = cls(PolicyConfig.from_dict(meta["policy_config"]), dtype=dtype)
        net.params.load_state(arrays)
        return net, meta
