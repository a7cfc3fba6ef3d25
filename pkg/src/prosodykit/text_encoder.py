"""Speaker-conditioned dual-stream text encoder producing per-phoneme embeddings.

Two token streams (phonemes, BPE subwords) each pass through a stack of
transformer blocks with relative positional attention and convolutional FFNs.
BPE hidden states are pooled per word and expanded back to phoneme resolution,
summed with the phoneme stream, and refined by shared blocks followed by layer
norm and a convolutional projection.

Speaker conditioning uses zero-initialized adaptive layer-norm modulation: a
per-block network maps the speaker embedding to scale/shift/gate vectors whose
final layer starts at zero, so every block is an identity residual at
initialization and the output is speaker-independent until training moves the
gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
from torch import nn

from .corpus import Utterance

PHONEME_STREAM = "phoneme"
BPE_STREAM = "bpe"


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_blocks_per_stream: int = 4
    n_shared_blocks: int = 4
    ffn_kernel_size: int = 3
    ffn_hidden: int | None = None      # defaults to 2 * d_model
    rel_pos_clip: int = 16
    d_speaker: int = 32
    d_out: int = 64
    dropout: float = 0.1
    adaln_enabled: bool = True
    proj_kernel_size: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        counts = (self.d_model, self.n_heads, self.n_blocks_per_stream,
                  self.n_shared_blocks, self.ffn_kernel_size, self.rel_pos_clip,
                  self.d_speaker, self.d_out)
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.ffn_kernel_size % 2 == 0 or self.proj_kernel_size % 2 == 0:
            raise ValueError("conv kernel sizes must be odd")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 2 * self.d_model

    def with_adaln(self, enabled: bool) -> "EncoderConfig":
        return replace(self, adaln_enabled=enabled)


@dataclass
class SpeakerEmbedding:
    vector: torch.Tensor  # [d_speaker]

    def __post_init__(self):
        self.vector = torch.as_tensor(self.vector, dtype=torch.float32).reshape(-1)
        if not torch.isfinite(self.vector).all():
            raise ValueError("speaker embedding must be finite")


@dataclass
class ProsodyEmbeddingSequence:
    matrix: torch.Tensor  # [T_ph, d_out]
    utterance_id: str


class RelativePositionAttention(nn.Module):
    """Multi-head self-attention with learned per-head relative key offsets.

    Relative distances are clipped to +-clip, so all pairs at distance >= clip
    share one embedding per direction (Shaw-style, keys only).
    """

    def __init__(self, d_model, n_heads, clip, dropout):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.clip = clip
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.rel_key = nn.Parameter(
            torch.randn(n_heads, 2 * clip + 1, self.d_head) * 0.02
        )
        self.attn_dropout = nn.Dropout(dropout)

    def relative_index(self, t: int, device=None) -> torch.Tensor:
        """[t, t] index into the relative embedding table: clamp(j - i) + clip."""
        pos = torch.arange(t, device=device)
        rel = pos[None, :] - pos[:, None]
        return rel.clamp(-self.clip, self.clip) + self.clip

    def rel_logits(self, q: torch.Tensor) -> torch.Tensor:
        """Relative-position part of the attention logits, [B, H, T, T]."""
        t = q.shape[2]
        # [B, H, T, 2*clip+1] then gather the (i, j) pattern
        all_rel = torch.einsum("bhid,hrd->bhir", q, self.rel_key)
        idx = self.relative_index(t, q.device)
        idx = idx.unsqueeze(0).unsqueeze(0).expand(q.shape[0], self.n_heads, t, t)
        return torch.gather(all_rel, 3, idx)

    def forward(self, x, key_mask):
        b, t, _ = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.d_head)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # [B,H,T,dh]

        logits = (q @ k.transpose(-1, -2) + self.rel_logits(q)) / math.sqrt(self.d_head)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = self.attn_dropout(torch.softmax(logits, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(b, t, -1)
        return self.out(ctx)


class ConvFFN(nn.Module):
    """Position-wise feed-forward with 1-D convolutions and GELU."""

    def __init__(self, d_model, hidden, kernel_size, dropout):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv1d(d_model, hidden, kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(hidden, d_model, kernel_size, padding=pad)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        # zero padded positions so the kernel sees the same zeros a lone
        # sequence would see beyond its boundary
        x = x * key_mask.unsqueeze(-1)
        h = self.conv1(x.transpose(1, 2))
        h = self.dropout(torch.nn.functional.gelu(h))
        return self.conv2(h).transpose(1, 2)


class SpeakerModulation(nn.Module):
    """Maps a speaker embedding to the six per-block modulation vectors.

    The output layer is zero-initialized, so scale/shift/gate are all zero at
    initialization regardless of the speaker input.
    """

    def __init__(self, d_speaker, d_model):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_speaker, d_model),
            nn.GELU(),
            nn.Linear(d_model, 6 * d_model),
        )
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, speaker):
        return self.net(speaker).chunk(6, dim=-1)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with adaptive modulation and gated residuals."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(cfg.d_model, elementwise_affine=False)
        self.attn = RelativePositionAttention(
            cfg.d_model, cfg.n_heads, cfg.rel_pos_clip, cfg.dropout
        )
        self.ffn = ConvFFN(cfg.d_model, cfg.ffn_dim, cfg.ffn_kernel_size, cfg.dropout)
        self.modulation = SpeakerModulation(cfg.d_speaker, cfg.d_model)

    def forward(self, x, speaker, key_mask):
        g1, b1, a1, g2, b2, a2 = (m.unsqueeze(1) for m in self.modulation(speaker))
        h = self.norm1(x) * (1 + g1) + b1
        x = x + a1 * self.attn(h, key_mask)
        h = self.norm2(x) * (1 + g2) + b2
        x = x + a2 * self.ffn(h, key_mask)
        return x


def word_pool(bpe_hidden: torch.Tensor, bpe_word) -> torch.Tensor:
    """Mean of BPE hidden rows per word: [T_bpe, d] -> [W, d]."""
    bpe_word = torch.as_tensor(bpe_word, dtype=torch.long, device=bpe_hidden.device)
    n_words = int(bpe_word.max()) + 1
    counts = torch.bincount(bpe_word, minlength=n_words)
    if (counts == 0).any():
        missing = int((counts == 0).nonzero()[0])
        raise ValueError(f"word {missing} has zero BPE tokens")
    pooled = torch.zeros(n_words, bpe_hidden.shape[1], dtype=bpe_hidden.dtype,
                         device=bpe_hidden.device)
    pooled.index_add_(0, bpe_word, bpe_hidden)
    return pooled / counts.unsqueeze(1).to(bpe_hidden.dtype)


def word_to_phoneme_expand(pooled: torch.Tensor, phoneme_word) -> torch.Tensor:
    """Repeat each word's pooled row per phoneme: [W, d] -> [T_ph, d]."""
    idx = torch.as_tensor(phoneme_word, dtype=torch.long, device=pooled.device)
    if idx.min() < 0 or idx.max() >= pooled.shape[0]:
        raise ValueError("phoneme_word indices out of range")
    return pooled[idx]


def _word_pool_expand_batch(bpe_hidden, bpe_word, bpe_mask, phoneme_word, ph_mask):
    """Batched pool-then-expand; padded positions map to word slot 0 and are
    re-masked afterwards, so they never influence real rows."""
    b, _, d = bpe_hidden.shape
    n_words_per = [int(bpe_word[i][bpe_mask[i]].max()) + 1 for i in range(b)]
    offsets = torch.zeros(b, dtype=torch.long, device=bpe_hidden.device)
    if b > 1:
        offsets[1:] = torch.cumsum(
            torch.tensor(n_words_per[:-1], device=bpe_hidden.device), 0
        )
    total = sum(n_words_per)

    flat_idx = (bpe_word + offsets[:, None]).masked_fill(~bpe_mask, 0)
    flat_hidden = (bpe_hidden * bpe_mask.unsqueeze(-1)).reshape(-1, d)
    sums = torch.zeros(total, d, dtype=bpe_hidden.dtype, device=bpe_hidden.device)
    sums.index_add_(0, flat_idx.reshape(-1), flat_hidden)
    counts = torch.zeros(total, dtype=bpe_hidden.dtype, device=bpe_hidden.device)
    counts.index_add_(0, flat_idx.reshape(-1),
                      bpe_mask.reshape(-1).to(bpe_hidden.dtype))
    pooled = sums / counts.clamp_min(1.0).unsqueeze(1)

    ph_idx = (phoneme_word + offsets[:, None]).masked_fill(~ph_mask, 0)
    expanded = pooled[ph_idx.reshape(-1)].reshape(b, -1, d)
    return expanded * ph_mask.unsqueeze(-1)


class TextEncoder(nn.Module):
    """Dual-stream encoder: token streams -> per-phoneme prosodic embeddings."""

    def __init__(self, cfg: EncoderConfig, phoneme_vocab_size: int, bpe_vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.phoneme_embedding = nn.Embedding(phoneme_vocab_size, cfg.d_model, padding_idx=0)
        self.bpe_embedding = nn.Embedding(bpe_vocab_size, cfg.d_model, padding_idx=0)
        self.phoneme_blocks = nn.ModuleList(
            EncoderBlock(cfg) for _ in range(cfg.n_blocks_per_stream)
        )
        self.bpe_blocks = nn.ModuleList(
            EncoderBlock(cfg) for _ in range(cfg.n_blocks_per_stream)
        )
        self.shared_blocks = nn.ModuleList(
            EncoderBlock(cfg) for _ in range(cfg.n_shared_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.proj = nn.Conv1d(cfg.d_model, cfg.d_out, cfg.proj_kernel_size,
                              padding=cfg.proj_kernel_size // 2)

    def _condition(self, speaker: torch.Tensor) -> torch.Tensor:
        # with AdaLN disabled the speaker signal is never consumed; the
        # modulation networks still run on zeros (bias-only, trainable)
        if not self.cfg.adaln_enabled:
            return torch.zeros_like(speaker)
        return speaker

    def stream_hidden(self, token_ids, speaker, stream, key_mask=None):
        """Batched stream encoding: [B, T] ids -> [B, T, d_model]."""
        if token_ids.numel() == 0 or token_ids.shape[1] == 0:
            raise ValueError("cannot encode an empty token sequence")
        emb = {PHONEME_STREAM: self.phoneme_embedding, BPE_STREAM: self.bpe_embedding}
        blocks = {PHONEME_STREAM: self.phoneme_blocks, BPE_STREAM: self.bpe_blocks}
        if stream not in emb:
            raise ValueError(f"unknown stream {stream!r}")
        if int(token_ids.max()) >= emb[stream].num_embeddings or int(token_ids.min()) < 0:
            raise ValueError("token id out of vocabulary range")
        if key_mask is None:
            key_mask = torch.ones_like(token_ids, dtype=torch.bool)
        cond = self._condition(speaker)
        x = emb[stream](token_ids)
        for block in blocks[stream]:
            x = block(x, cond, key_mask)
        return x

    def encode_stream(self, token_ids, speaker: SpeakerEmbedding, stream: str) -> torch.Tensor:
        """Single-sequence stream encoding: [T] ids -> [T, d_model]."""
        ids = torch.as_tensor(token_ids, dtype=torch.long).unsqueeze(0)
        spk = speaker.vector.to(next(self.parameters()).dtype).unsqueeze(0)
        return self.stream_hidden(ids, spk, stream)[0]

    def forward_batch(self, phonemes, bpe, phoneme_word, bpe_word,
                      ph_mask, bpe_mask, speaker):
        """Padded batch -> per-phoneme embeddings [B, T_ph, d_out]."""
        cond = self._condition(speaker)
        hp = self.stream_hidden(phonemes, speaker, PHONEME_STREAM, ph_mask)
        hb = self.stream_hidden(bpe, speaker, BPE_STREAM, bpe_mask)
        expanded = _word_pool_expand_batch(hb, bpe_word, bpe_mask, phoneme_word, ph_mask)
        x = hp + expanded
        for block in self.shared_blocks:
            x = block(x, cond, ph_mask)
        x = self.final_norm(x)
        x = x * ph_mask.unsqueeze(-1)
        return self.proj(x.transpose(1, 2)).transpose(1, 2)

    def forward(self, utterance: Utterance, speaker: SpeakerEmbedding) -> ProsodyEmbeddingSequence:
        """Encode one utterance into its per-phoneme embedding sequence."""
        dtype = next(self.parameters()).dtype
        device = next(self.parameters()).device
        as_t = lambda a: torch.as_tensor(a, dtype=torch.long, device=device).unsqueeze(0)
        ph, bp = as_t(utterance.phonemes), as_t(utterance.bpe)
        out = self.forward_batch(
            ph, bp, as_t(utterance.phoneme_word), as_t(utterance.bpe_word),
            torch.ones_like(ph, dtype=torch.bool),
            torch.ones_like(bp, dtype=torch.bool),
            speaker.vector.to(device=device, dtype=dtype).unsqueeze(0),
        )
        return ProsodyEmbeddingSequence(matrix=out[0], utterance_id=utterance.id)
