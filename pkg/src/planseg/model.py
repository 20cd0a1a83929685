"""The three-branch network: shared backbone, pixel branch, lesion branch with
masked-attention decoding over mixed learned + anchor queries, and a
patient-level classification branch.

Tensor layout is ``(B, C, X, Y, Z)``. In-plane strides are 16/8/4 with depth
strides 4/2/1 (slices are thick, so depth is downsampled less). Per-query
binary mask logits live on the stride-(4, 4, 1) grid and are the inner product
of a query vector with the mask-feature tensor at each cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .labels import NUM_PATIENT_LABELS, NUM_SEMANTIC_CLASSES, NUM_TUMOR_TYPES, tumor_mask
from .volume import Volume, connected_components

# (x, y, z) stride per scale, coarse to fine; the last entry is the mask grid.
SCALE_STRIDES = ((16, 16, 4), (8, 8, 2), (4, 4, 1))
MASK_STRIDE = SCALE_STRIDES[-1]


def pad_to_strides(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int, int]]:
    """Right-pad spatial dims to multiples of the deepest stride (16, 16, 4)."""
    sx, sy, sz = x.shape[-3:]
    px = (-sx) % 16
    py = (-sy) % 16
    pz = (-sz) % 4
    if px or py or pz:
        x = F.pad(x, (0, pz, 0, py, 0, px))
    return x, (px, py, pz)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride=(1, 1, 1)):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel_size=3, stride=stride, padding=1, bias=False)
        self.norm = nn.InstanceNorm3d(c_out, affine=True)
        self.act = nn.LeakyReLU(0.01, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Encoder(nn.Module):
    """U-Net style encoder; returns the stem map and one map per stage."""

    def __init__(self, in_channels: int, base_width: int):
        super().__init__()
        w = base_width
        self.widths = [w, 2 * w, 4 * w, 6 * w, 8 * w]
        self.stem = nn.Sequential(ConvBlock(in_channels, w), ConvBlock(w, w))
        strides = [(2, 2, 1), (2, 2, 1), (2, 2, 2), (2, 2, 2)]
        stages = []
        for i, s in enumerate(strides):
            stages.append(
                nn.Sequential(
                    ConvBlock(self.widths[i], self.widths[i + 1], stride=s),
                    ConvBlock(self.widths[i + 1], self.widths[i + 1]),
                )
            )
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats  # strides (1,1,1), (2,2,1), (4,4,1), (8,8,2), (16,16,4)


class PyramidDecoder(nn.Module):
    """Light feature pyramid: laterals to the embedding width, top-down fusion."""

    def __init__(self, enc_widths: list[int], embed_dim: int):
        super().__init__()
        # encoder indices 2, 3, 4 hold strides (4,4,1), (8,8,2), (16,16,4)
        self.laterals = nn.ModuleList(
            nn.Conv3d(enc_widths[i], embed_dim, kernel_size=1) for i in (4, 3, 2)
        )
        self.smooth = nn.ModuleList(ConvBlock(embed_dim, embed_dim) for _ in range(3))

    def forward(self, enc_feats):
        srcs = [enc_feats[4], enc_feats[3], enc_feats[2]]
        out = []
        prev = None
        for lat, smooth, src in zip(self.laterals, self.smooth, srcs):
            cur = lat(src)
            if prev is not None:
                cur = cur + F.interpolate(prev, size=cur.shape[-3:], mode="trilinear",
                                          align_corners=False)
            cur = smooth(cur)
            out.append(cur)
            prev = cur
        return out  # [f16, f8, f4], all embed_dim channels


def mask_logits_from_embedding(queries: torch.Tensor, mask_features: torch.Tensor) -> torch.Tensor:
    """Per-query binary mask logits: the inner product of each query vector
    with the mask-feature tensor at every cell. (Nq, M) x (M, gx, gy, gz) ->
    (Nq, gx, gy, gz)."""
    return torch.einsum("qm,mxyz->qxyz", queries, mask_features)


class MaskHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(inplace=True),
            nn.Linear(dim, dim), nn.ReLU(inplace=True),
            nn.Linear(dim, dim),
        )

    def forward(self, queries: torch.Tensor, mask_features: torch.Tensor) -> torch.Tensor:
        return mask_logits_from_embedding(self.mlp(queries), mask_features)


class DecoderBlock(nn.Module):
    """Masked cross-attention to one scale, then query self-attention and FFN."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.ReLU(inplace=True), nn.Linear(4 * dim, dim)
        )
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, queries, keys, values, attn_mask):
        q = queries.unsqueeze(0)
        out, _ = self.cross(q, keys.unsqueeze(0), values.unsqueeze(0), attn_mask=attn_mask)
        queries = self.norm1(queries + out.squeeze(0))
        q = queries.unsqueeze(0)
        out, _ = self.self_attn(q, q, q)
        queries = self.norm2(queries + out.squeeze(0))
        queries = self.norm3(queries + self.ffn(queries))
        return queries


class DualPathBlock(nn.Module):
    """Exchanges information between a pixel map and a small set of global tokens."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.pix_local = ConvBlock(dim, dim)
        self.pix_from_tok = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.pix_norm = nn.LayerNorm(dim)
        self.tok_from_pix = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.tok_norm1 = nn.LayerNorm(dim)
        self.tok_self = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.tok_norm2 = nn.LayerNorm(dim)
        self.tok_ffn = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.ReLU(inplace=True), nn.Linear(2 * dim, dim)
        )
        self.tok_norm3 = nn.LayerNorm(dim)

    def forward(self, pix_map: torch.Tensor, tokens: torch.Tensor):
        pix_map = pix_map + self.pix_local(pix_map.unsqueeze(0)).squeeze(0)
        m = pix_map.shape[0]
        pix = pix_map.reshape(m, -1).transpose(0, 1)  # (S, M)
        tok = tokens
        out, _ = self.pix_from_tok(pix.unsqueeze(0), tok.unsqueeze(0), tok.unsqueeze(0))
        pix = self.pix_norm(pix + out.squeeze(0))
        out, _ = self.tok_from_pix(tok.unsqueeze(0), pix.unsqueeze(0), pix.unsqueeze(0))
        tok = self.tok_norm1(tok + out.squeeze(0))
        out, _ = self.tok_self(tok.unsqueeze(0), tok.unsqueeze(0), tok.unsqueeze(0))
        tok = self.tok_norm2(tok + out.squeeze(0))
        tok = self.tok_norm3(tok + self.tok_ffn(tok))
        pix_map = pix.transpose(0, 1).reshape(pix_map.shape)
        return pix_map, tok


@dataclass
class AnchorInfo:
    """Provenance of one anchor query: the source component in the pixel prediction."""

    source_cc_id: int
    voxel_count: int


@dataclass
class CaseOutput:
    """Per-case network outputs. Spatial tensors live on the padded grid; use
    ``input_shape`` to crop back."""

    pixel_logits: torch.Tensor  # (15, X, Y, Z), already cropped to input_shape
    mask_features: torch.Tensor | None = None  # (M, gx, gy, gz)
    class_logits: torch.Tensor | None = None  # (Nq, C+1); last slot = no-object
    mask_logits: torch.Tensor | None = None  # (Nq, gx, gy, gz)
    patient_logits: torch.Tensor | None = None  # (11,)
    anchors: list[AnchorInfo] = field(default_factory=list)
    num_queries: int = 0
    input_shape: tuple[int, int, int] = (0, 0, 0)
    padded_shape: tuple[int, int, int] = (0, 0, 0)


class LesionPatientNet(nn.Module):
    """Backbone + pixel branch + lesion decoder + patient head."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        m = cfg.embed_dim
        self.encoder = Encoder(in_channels, cfg.base_width)
        self.decoder = PyramidDecoder(self.encoder.widths, m)
        self.mask_feature_conv = ConvBlock(m, m)
        self.pixel_fuse = nn.Conv3d(m + cfg.base_width, m, kernel_size=1)
        self.pixel_head = nn.Conv3d(m, NUM_SEMANTIC_CLASSES, kernel_size=1)
        self.query_embed = nn.Embedding(cfg.num_queries, m)
        self.blocks = nn.ModuleList(
            DecoderBlock(m, cfg.attn_heads) for _ in range(cfg.decoder_blocks)
        )
        self.class_head = nn.Linear(m, NUM_TUMOR_TYPES + 1)
        self.mask_head = MaskHead(m)
        g = cfg.pos_grid
        self.pos_embed = nn.ParameterList(
            nn.Parameter(torch.randn(1, m, g, g, g) * 0.02) for _ in SCALE_STRIDES
        )
        self.key_proj = nn.ModuleList(nn.Linear(m, m) for _ in SCALE_STRIDES)
        enc_w = self.encoder.widths
        self.patient_proj = nn.ModuleList(
            [
                nn.Conv3d(enc_w[3], m, kernel_size=1),  # encoder stride 8
                nn.Conv3d(enc_w[4], m, kernel_size=1),  # encoder stride 16
            ]
        )
        self.patient_merge = nn.Conv3d(5 * m, m, kernel_size=1)
        self.patient_tokens = nn.Parameter(torch.randn(cfg.patient_tokens, m) * 0.02)
        self.patient_blocks = nn.ModuleList(
            DualPathBlock(m, cfg.attn_heads) for _ in range(cfg.patient_blocks)
        )
        self.patient_head = nn.Linear(2 * m, NUM_PATIENT_LABELS)

    # -- backbone ---------------------------------------------------------

    def forward_backbone(self, x: torch.Tensor) -> dict:
        """Multi-scale features plus the full-resolution pixel embedding.

        ``x`` is (B, C, X, Y, Z); spatial dims are padded internally to stride
        multiples and the padding echoed in the result.
        """
        input_shape = tuple(x.shape[-3:])
        x, pad = pad_to_strides(x)
        enc = self.encoder(x)
        f16, f8, f4 = self.decoder(enc)
        up = F.interpolate(f4, size=x.shape[-3:], mode="trilinear", align_corners=False)
        pixel_embed = self.pixel_fuse(torch.cat([up, enc[0]], dim=1))
        pixel_logits = self.pixel_head(pixel_embed)
        return {
            "enc": enc,
            "scales": [f16, f8, f4],
            "pixel_logits": pixel_logits,
            "input_shape": input_shape,
            "padded_shape": tuple(x.shape[-3:]),
            "pad": pad,
        }

    def _pos_for(self, scale_idx: int, size) -> torch.Tensor:
        pos = F.interpolate(
            self.pos_embed[scale_idx], size=size, mode="trilinear", align_corners=False
        )
        return pos.squeeze(0)  # (M, gx, gy, gz)

    # -- lesion branch ----------------------------------------------------

    def make_anchor_queries(
        self,
        pixel_labels: np.ndarray,
        mask_features: torch.Tensor,
        a_max: int | None = None,
    ) -> tuple[torch.Tensor, list[AnchorInfo]]:
        """Anchor queries: mean mask-feature embedding inside each predicted lesion.

        Components of the predicted tumor mask are ranked by voxel count
        (ties by (min z, min y, min x)) and the top ``a_max`` kept. Each anchor
        is the mean of the mask-feature vectors over the component's cells, plus
        the mean positional embedding of those cells. An empty prediction yields
        an empty anchor set.
        """
        if a_max is None:
            a_max = self.cfg.max_anchor_queries
        m = mask_features.shape[0]
        binary = tumor_mask(pixel_labels)
        if a_max == 0 or not binary.any():
            return mask_features.new_zeros((0, m)), []
        comps = connected_components(Volume(binary, (1.0, 1.0, 1.0)), connectivity=26)
        comps.sort(key=lambda c: (-c.voxel_count, c.sort_key()))
        comps = comps[:a_max]
        pos4 = self._pos_for(2, mask_features.shape[-3:])
        anchors = []
        infos = []
        for comp in comps:
            cells = np.unique(
                np.stack(
                    [
                        comp.voxels[:, 0] // MASK_STRIDE[0],
                        comp.voxels[:, 1] // MASK_STRIDE[1],
                        comp.voxels[:, 2] // MASK_STRIDE[2],
                    ],
                    axis=1,
                ),
                axis=0,
            )
            cells = np.minimum(cells, np.array(mask_features.shape[-3:]) - 1)
            idx = torch.as_tensor(cells, dtype=torch.long, device=mask_features.device)
            emb = mask_features[:, idx[:, 0], idx[:, 1], idx[:, 2]].mean(dim=1)
            emb = emb + pos4[:, idx[:, 0], idx[:, 1], idx[:, 2]].mean(dim=1)
            anchors.append(emb)
            infos.append(AnchorInfo(source_cc_id=comp.id, voxel_count=comp.voxel_count))
        return torch.stack(anchors, dim=0), infos

    def _attention_mask(self, mask_logits: torch.Tensor, size) -> torch.Tensor | None:
        """Boolean attention mask at a scale: True blocks a key. Queries whose
        predicted foreground is empty at this scale fall back to unmasked."""
        att = F.interpolate(
            mask_logits.unsqueeze(0), size=size, mode="trilinear", align_corners=False
        ).squeeze(0)
        blocked = (att.sigmoid() < 0.5).flatten(1)  # (Nq, S)
        dead = blocked.all(dim=1)
        blocked[dead] = False
        return blocked

    def forward_lesion_branch(
        self, scales: list[torch.Tensor], mask_features: torch.Tensor,
        anchor_queries: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode mixed learned + anchor queries into class and mask logits."""
        queries = torch.cat([self.query_embed.weight, anchor_queries], dim=0)
        mask_logits = self.mask_head(queries, mask_features)
        for i, block in enumerate(self.blocks):
            scale_idx = i % len(scales)
            feat = scales[scale_idx]
            size = feat.shape[-3:]
            attn_mask = self._attention_mask(mask_logits, size)
            keys = feat.flatten(-3).transpose(0, 1)  # (S, M)
            pos = self._pos_for(scale_idx, size).flatten(-3).transpose(0, 1)
            keys = self.key_proj[scale_idx](keys + pos)
            values = feat.flatten(-3).transpose(0, 1)
            queries = block(queries, keys, values, attn_mask)
            mask_logits = self.mask_head(queries, mask_features)
        class_logits = self.class_head(queries)
        return class_logits, mask_logits

    # -- patient branch ---------------------------------------------------

    def forward_patient_branch(self, enc: list, scales: list[torch.Tensor]) -> torch.Tensor:
        f16, f8, f4 = scales
        size = f8.shape[-3:]
        parts = [
            F.interpolate(self.patient_proj[0](enc[3]), size=size, mode="trilinear",
                          align_corners=False),
            F.interpolate(self.patient_proj[1](enc[4]), size=size, mode="trilinear",
                          align_corners=False),
            F.interpolate(f16, size=size, mode="trilinear", align_corners=False),
            f8,
            F.interpolate(f4, size=size, mode="trilinear", align_corners=False),
        ]
        pix = self.patient_merge(torch.cat(parts, dim=1)).squeeze(0)
        pos = self._pos_for(1, size)
        pix = pix + pos
        tokens = self.patient_tokens
        for block in self.patient_blocks:
            pix, tokens = block(pix, tokens)
        pooled = torch.cat([pix.mean(dim=(-3, -2, -1)), tokens.mean(dim=0)], dim=0)
        return self.patient_head(pooled)

    # -- full forward -----------------------------------------------------

    def forward_case(
        self,
        x: torch.Tensor,
        stage1: bool = False,
        use_anchors: bool = True,
    ) -> CaseOutput:
        """Run one case (C, X, Y, Z). Stage 1 stops after the pixel branch."""
        bb = self.forward_backbone(x.unsqueeze(0))
        ix, iy, iz = bb["input_shape"]
        pixel_logits = bb["pixel_logits"][0, :, :ix, :iy, :iz]
        out = CaseOutput(
            pixel_logits=pixel_logits,
            input_shape=bb["input_shape"],
            padded_shape=bb["padded_shape"],
        )
        if stage1:
            return out
        scales = [s[0] for s in bb["scales"]]
        mask_features = self.mask_feature_conv(bb["scales"][2])[0]
        if use_anchors:
            pred_labels = pixel_logits.detach().argmax(dim=0).cpu().numpy()
            anchor_q, infos = self.make_anchor_queries(pred_labels, mask_features)
        else:
            anchor_q = mask_features.new_zeros((0, mask_features.shape[0]))
            infos = []
        class_logits, mask_logits = self.forward_lesion_branch(scales, mask_features, anchor_q)
        patient_logits = self.forward_patient_branch(
            [e[0:1] for e in bb["enc"]], [s[0:1] for s in bb["scales"]]
        )
        out.mask_features = mask_features
        out.class_logits = class_logits
        out.mask_logits = mask_logits
        out.patient_logits = patient_logits
        out.anchors = infos
        out.num_queries = class_logits.shape[0]
        return out


def merge_semantic(class_logits: torch.Tensor, mask_logits: torch.Tensor) -> torch.Tensor:
    """Per-class score volume: sum over queries of p(class) * sigmoid(mask).

    The no-object slot is dropped before the product, so an all-no-object
    query set contributes nothing anywhere.
    """
    probs = class_logits.softmax(dim=-1)[:, :-1]  # (Nq, C)
    masks = mask_logits.sigmoid()  # (Nq, gx, gy, gz)
    return torch.einsum("qc,qxyz->cxyz", probs, masks)


def stack_to_tensor(rec, mode: str, cfg: ModelConfig) -> torch.Tensor:
    """Normalized network input (C, X, Y, Z) for a case record; NC mode keeps
    only the non-contrast phase."""
    if mode == "NC":
        phases = [rec.stack.phases[0]]
    elif mode == "DCE":
        phases = list(rec.stack.phases)
    else:
        raise ValueError(f"mode must be 'NC' or 'DCE', got {mode!r}")
    arrs = [(ph.data.astype(np.float32) - cfg.norm_center) / cfg.norm_scale for ph in phases]
    return torch.from_numpy(np.stack(arrs, axis=0))


def mode_channels(mode: str) -> int:
    if mode == "NC":
        return 1
    if mode == "DCE":
        return 3
    raise ValueError(f"mode must be 'NC' or 'DCE', got {mode!r}")
