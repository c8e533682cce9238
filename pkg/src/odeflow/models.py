"""Patch embedding, the discrete teacher ViT, the ODE-ViT and the shared head.

The teacher is a conventional pre-norm ViT whose L blocks each own their
parameters.  The ODE-ViT replaces the block stack with one autonomous field
integrated for N Euler steps; both classify the final CLS row through the same
kind of head (LayerNorm followed by a linear map), so a student can reuse and
freeze its teacher's head and embedder.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

from . import container
from . import diffcore as dc
from .diffcore import Tensor
from .dynamics import (
    OdeBlockParams,
    _attention,
    params_from_sections,
    params_to_sections,
    spectral_init,
    truncated_normal,
)
from .integrator import Trajectory, euler_integrate


def _param(arr, requires_grad=True) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def _named(obj) -> dict[str, Tensor]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if isinstance(getattr(obj, f.name), Tensor)}


def set_trainable(tensors, flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag


# ---------------------------------------------------------------- embedding


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, H, W, C)`` images to ``(B, M, S*S*C)`` non-overlapping patches.

    Patches are taken row by row over the grid; each is flattened in
    ``(row, col, channel)`` order, which makes the projection equivalent to a
    stride-S convolution.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, h, w, c = images.shape
    s = patch_size
    if h % s or w % s:
        raise dc.ShapeError(f"image {h}x{w} not divisible by patch size {s}")
    p = images.reshape(b, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)
    p = p.reshape(b, (h // s) * (w // s), s * s * c)
    return p[0] if single else p


@dataclass
class PatchEmbedder:
    patch_size: int
    image_size: int
    channels: int
    projection: Tensor  # (S*S*C, D)
    cls_token: Tensor  # (D,)
    pos_embed: Tensor  # (M+1, D)
    registers: Tensor  # (R, D)

    @classmethod
    def create(cls, image_size: int = 32, patch_size: int = 8, channels: int = 3, dim: int = 64,
               register_count: int = 0, seed: int = 0) -> "PatchEmbedder":
        if image_size % patch_size:
            raise dc.ShapeError(f"image size {image_size} not divisible by patch size {patch_size}")
        rng = np.random.default_rng(seed)
        m = (image_size // patch_size) ** 2
        return cls(
            patch_size,
            image_size,
            channels,
            _param(truncated_normal(rng, (patch_size * patch_size * channels, dim))),
            _param(truncated_normal(rng, (dim,))),
            _param(truncated_normal(rng, (m + 1, dim))),
            _param(truncated_normal(rng, (register_count, dim))),
        )

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def register_count(self) -> int:
        return self.registers.shape[0]

    @property
    def n_tokens(self) -> int:
        return 1 + self.num_patches + self.register_count

    def parameters(self) -> list[Tensor]:
        return list(_named(self).values())


def patchify(images, e: PatchEmbedder) -> Tensor:
    """Embed images as token states ``(B, 1 + M + R, D)`` (or unbatched).

    Rows are CLS, the M projected patches, then the register tokens.
    Positional embeddings are added to CLS and patch rows only.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    patches = extract_patches(images if not single else images[None], e.patch_size)
    b, m, _ = patches.shape
    if m != e.num_patches:
        raise dc.ShapeError(f"image gives {m} patches, embedder expects {e.num_patches}")
    dim = e.dim
    emb = dc.matmul(Tensor(patches), e.projection)
    cls = dc.add(Tensor(np.zeros((b, 1, dim))), dc.reshape(e.cls_token, (1, 1, dim)))
    x = dc.add(dc.concat([cls, emb], axis=1), e.pos_embed)
    if e.register_count:
        reg = dc.add(Tensor(np.zeros((b, e.register_count, dim))),
                     dc.reshape(e.registers, (1, e.register_count, dim)))
        x = dc.concat([x, reg], axis=1)
    return dc.index(x, 0) if single else x


# ---------------------------------------------------------------- head


@dataclass
class ClassifierHead:
    norm_gain: Tensor  # (D,)
    norm_bias: Tensor  # (D,)
    weight: Tensor  # (D, C)
    bias: Tensor  # (C,)

    @classmethod
    def create(cls, dim: int, num_classes: int, seed: int = 0) -> "ClassifierHead":
        rng = np.random.default_rng(seed)
        return cls(_param(np.ones(dim)), _param(np.zeros(dim)),
                   _param(truncated_normal(rng, (dim, num_classes))), _param(np.zeros(num_classes)))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return list(_named(self).values())

    def __call__(self, cls_rows) -> Tensor:
        z = dc.layer_norm(cls_rows, self.norm_gain, self.norm_bias)
        return dc.add(dc.matmul(z, self.weight), self.bias)

    def logits(self, cls_rows) -> np.ndarray:
        """Plain-array evaluation, for sweeps and analysis."""
        x = np.asarray(cls_rows)
        single = x.ndim == 1
        out = self(Tensor(x[None] if single else x)).data
        return out[0] if single else out


def cls_of(x: Tensor) -> Tensor:
    return dc.index(x, (Ellipsis, 0, slice(None)))


# ---------------------------------------------------------------- teacher


@dataclass
class TeacherBlock:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor  # (H, D, d)
    wk: Tensor
    wv: Tensor
    wo: Tensor  # (D, D)
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor  # (D, rD)
    w2: Tensor  # (rD, D)

    @classmethod
    def create(cls, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator) -> "TeacherBlock":
        d = dim // heads

        def tn(*shape):
            return _param(truncated_normal(rng, shape))

        return cls(_param(np.ones(dim)), _param(np.zeros(dim)), tn(heads, dim, d), tn(heads, dim, d),
                   tn(heads, dim, d), tn(dim, dim), _param(np.ones(dim)), _param(np.zeros(dim)),
                   tn(dim, mlp_ratio * dim), tn(mlp_ratio * dim, dim))

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]

    def named(self) -> dict[str, Tensor]:
        return _named(self)

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())


def teacher_block(x, blk: TeacherBlock) -> Tensor:
    """``x + Attn(LN(x))`` followed by ``x + MLP(LN(x))``."""
    x = dc.add(x, _attention(dc.layer_norm(x, blk.ln1_gain, blk.ln1_bias), blk)[1])
    h = dc.gelu(dc.matmul(dc.layer_norm(x, blk.ln2_gain, blk.ln2_bias), blk.w1))
    return dc.add(x, dc.matmul(h, blk.w2))


@dataclass
class TeacherViT:
    embedder: PatchEmbedder
    blocks: list[TeacherBlock]
    head: ClassifierHead

    @classmethod
    def create(cls, image_size: int = 32, patch_size: int = 8, channels: int = 3, dim: int = 64,
               heads: int = 4, depth: int = 4, mlp_ratio: int = 2, num_classes: int = 4,
               register_count: int = 0, seed: int = 0) -> "TeacherViT":
        if depth < 2:
            raise dc.ContractError("teacher depth must be >= 2")
        if dim % heads:
            raise dc.ShapeError(f"D={dim} not divisible by H={heads}")
        rng = np.random.default_rng([seed, 1])
        return cls(
            PatchEmbedder.create(image_size, patch_size, channels, dim, register_count, seed),
            [TeacherBlock.create(dim, heads, mlp_ratio, rng) for _ in range(depth)],
            ClassifierHead.create(dim, num_classes, seed + 1),
        )

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def parameters(self) -> list[Tensor]:
        out = self.embedder.parameters()
        for b in self.blocks:
            out += b.parameters()
        return out + self.head.parameters()


def teacher_hidden(x0, t: TeacherViT) -> list[Tensor]:
    hidden = [dc.as_tensor(x0)]
    for blk in t.blocks:
        hidden.append(teacher_block(hidden[-1], blk))
    return hidden


def teacher_forward(images, t: TeacherViT) -> tuple[list[Tensor], Tensor]:
    """``(hidden, logits)`` with ``hidden[0]`` the embedding and ``hidden[l]`` block l's output."""
    hidden = teacher_hidden(patchify(images, t.embedder), t)
    return hidden, t.head(cls_of(hidden[-1]))


# ---------------------------------------------------------------- student


@dataclass
class OdeViT:
    embedder: PatchEmbedder
    block: OdeBlockParams
    head: ClassifierHead
    N: int = 24
    T: float = 1.0

    @classmethod
    def create(cls, image_size: int = 32, patch_size: int = 8, channels: int = 3, dim: int = 64,
               heads: int = 4, mlp_ratio: int = 2, num_classes: int = 4, register_count: int = 0,
               N: int = 24, T: float = 1.0, target_norm: float = 1.0, seed: int = 0) -> "OdeViT":
        block = OdeBlockParams.zeros(dim, heads, mlp_ratio)
        spectral_init(block, target_norm, seed=seed)
        return cls(PatchEmbedder.create(image_size, patch_size, channels, dim, register_count, seed),
                   block, ClassifierHead.create(dim, num_classes, seed + 1), N, T)

    @classmethod
    def from_teacher(cls, teacher: TeacherViT, mlp_ratio: int = 2, N: int = 24, T: float = 1.0,
                     target_norm: float = 1.0, seed: int = 0, copy: bool = False) -> "OdeViT":
        """Student sharing the teacher's embedder and head (aliased, or copied)."""
        emb, head = teacher.embedder, teacher.head
        if copy:
            emb = PatchEmbedder(emb.patch_size, emb.image_size, emb.channels,
                                *[_param(t.data.copy()) for t in emb.parameters()])
            head = ClassifierHead(*[_param(t.data.copy()) for t in head.parameters()])
        block = OdeBlockParams.zeros(emb.dim, teacher.blocks[0].heads, mlp_ratio)
        spectral_init(block, target_norm, seed=seed)
        return cls(emb, block, head, N, T)

    def parameters(self) -> list[Tensor]:
        return self.embedder.parameters() + self.block.parameters() + self.head.parameters()


def odevit_forward(images, m: OdeViT, record: bool = True) -> tuple[Trajectory, Tensor]:
    """Integrate the embedded image and classify the final CLS row."""
    traj = euler_integrate(patchify(images, m.embedder), m.block, m.N, m.T, record)
    return traj, m.head(cls_of(traj.final))


def predict(logits) -> np.ndarray:
    """Argmax over classes; ties go to the lowest index."""
    return np.argmax(np.asarray(logits.data if isinstance(logits, Tensor) else logits), axis=-1)


def agreement(logits_a, logits_b):
    """Whether both logit vectors pick the same class (element-wise for batches)."""
    a = np.asarray(logits_a.data if isinstance(logits_a, Tensor) else logits_a)
    b = np.asarray(logits_b.data if isinstance(logits_b, Tensor) else logits_b)
    if a.shape[-1] != b.shape[-1]:
        raise dc.ShapeError("class counts differ")
    same = predict(a) == predict(b)
    return bool(same) if np.ndim(same) == 0 else same


# ---------------------------------------------------------------- checkpoints


def _embed_sections(e: PatchEmbedder) -> dict[str, np.ndarray]:
    return {f"embed.{k}": t.data for k, t in _named(e).items()}


def _head_sections(h: ClassifierHead) -> dict[str, np.ndarray]:
    return {f"head.{k}": t.data for k, t in _named(h).items()}


def _load_into(obj, sections, prefix):
    for k, t in _named(obj).items():
        key = prefix + k
        if key not in sections:
            raise container.FormatError(f"missing section {key!r}")
        if sections[key].size != t.size:
            raise container.FormatError(f"section {key!r} has wrong size")
        t.data = sections[key].reshape(t.shape).copy()


def _config_section(e: PatchEmbedder, num_classes: int, depth: int, N: int, T: float) -> np.ndarray:
    return np.array([e.image_size, e.patch_size, e.channels, e.register_count, num_classes,
                     depth, N, T], dtype=np.float64)


def model_to_container(model) -> container.Container:
    e, head = model.embedder, model.head
    if isinstance(model, TeacherViT):
        b0 = model.blocks[0]
        ratio = b0.w1.shape[1] // e.dim
        secs = {"config": _config_section(e, head.num_classes, model.depth, 0, 0.0)}
        secs.update(_embed_sections(e))
        for i, b in enumerate(model.blocks):
            secs.update({f"block{i}.{k}": t.data for k, t in b.named().items()})
        secs.update(_head_sections(head))
        return container.Container(e.dim, b0.heads, e.num_patches, ratio, container.KIND_TEACHER, secs)
    if isinstance(model, OdeViT):
        secs = {"config": _config_section(e, head.num_classes, 0, model.N, model.T)}
        secs.update(_embed_sections(e))
        secs.update(params_to_sections(model.block, "block."))
        secs.update(_head_sections(head))
        return container.Container(e.dim, model.block.heads, e.num_patches, model.block.mlp_ratio,
                                   container.KIND_STUDENT, secs)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def save_model(path: str | os.PathLike, model) -> None:
    container.save(path, model_to_container(model))


def model_from_container(c: container.Container):
    if "config" not in c.sections:
        raise container.FormatError("missing config section")
    img, ps, ch, regs, ncls, depth, N, T = c.sections["config"].tolist()
    img, ps, ch, regs, ncls, depth, N = map(int, (img, ps, ch, regs, ncls, depth, N))
    if c.kind == container.KIND_TEACHER:
        t = TeacherViT.create(img, ps, ch, c.dim, c.heads, depth, c.mlp_ratio, ncls, regs)
        _load_into(t.embedder, c.sections, "embed.")
        for i, b in enumerate(t.blocks):
            _load_into(b, c.sections, f"block{i}.")
        _load_into(t.head, c.sections, "head.")
        return t
    if c.kind == container.KIND_STUDENT:
        m = OdeViT(PatchEmbedder.create(img, ps, ch, c.dim, regs),
                   params_from_sections(c.sections, c.dim, c.heads, c.mlp_ratio, "block."),
                   ClassifierHead.create(c.dim, ncls), N, T)
        _load_into(m.embedder, c.sections, "embed.")
        _load_into(m.head, c.sections, "head.")
        return m
    raise container.FormatError(f"container kind {c.kind} is not a model")


def load_model(path: str | os.PathLike):
    return model_from_container(container.load(path))
