//! Fixed-resolution ViT feature extractor with tiling and 2×2 pixel-shuffle
//! token compression.
//!
//! Oversized images are resampled onto a tile grid chosen by aspect ratio
//! (never more than `max_tiles` sub-images), each tile runs through the
//! patch embedding and pre-norm transformer blocks independently, and the
//! resulting tokens are compressed 4:1 by concatenating each 2×2 patch
//! neighborhood into one channel-stacked token.

use crate::error::{Error, Result};
use crate::image::{Image, IMG_CHANNELS};
use crate::params::{seeded_uniform, ParamGroup, ParameterStore};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::{block_forward, init_block, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    /// Pixels per side of one tile.
    pub base_resolution: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_tiles: usize,
    /// Append a whole-image tile after the grid tiles of multi-tile layouts.
    pub use_thumbnail: bool,
}

impl VisionConfig {
    /// Desk-scale defaults: 32px tiles, 4px patches, 8×8 patch grid.
    pub fn desk() -> Self {
        VisionConfig {
            base_resolution: 32,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            max_tiles: 8,
            use_thumbnail: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_resolution == 0 || self.patch_size == 0 {
            return Err(Error::Config("vision: zero resolution or patch size".into()));
        }
        if self.base_resolution % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "vision: base resolution {} not divisible by patch size {}",
                self.base_resolution, self.patch_size
            )));
        }
        if (self.base_resolution / self.patch_size) % 2 != 0 {
            return Err(Error::Config(format!(
                "vision: {} patches per side is odd; pixel shuffle needs 2x2 groups",
                self.base_resolution / self.patch_size
            )));
        }
        if self.max_tiles == 0 {
            return Err(Error::Config("vision: max_tiles must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "vision: embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.base_resolution / self.patch_size
    }

    pub fn patches_per_tile(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Tokens one tile contributes after pixel shuffle.
    pub fn tokens_per_tile(&self) -> usize {
        self.patches_per_tile() / 4
    }

    /// Channel width of tokens after pixel shuffle.
    pub fn token_width(&self) -> usize {
        4 * self.embed_dim
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * IMG_CHANNELS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub includes_thumbnail: bool,
}

impl TileLayout {
    pub fn tile_count(&self) -> usize {
        self.grid_rows * self.grid_cols + usize::from(self.includes_thumbnail)
    }
}

/// Patch-token embeddings of one tile before pixel shuffle.
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub embeddings: Tensor,
}

/// Choose the tile grid whose aspect ratio is log-closest to the image's.
///
/// Among grids `(r, c)` with `r·c <= max_tiles`, minimizes
/// `|ln((c/r) / (w/h))|`; ties prefer fewer tiles, then fewer rows. Images
/// fitting the base resolution on both sides stay a single tile.
pub fn select_tile_grid(image_w: usize, image_h: usize, cfg: &VisionConfig) -> TileLayout {
    let single = TileLayout {
        grid_rows: 1,
        grid_cols: 1,
        includes_thumbnail: false,
    };
    if image_w.max(1) <= cfg.base_resolution && image_h.max(1) <= cfg.base_resolution {
        return single;
    }
    let aspect = image_w.max(1) as f64 / image_h.max(1) as f64;
    let mut best = (f64::INFINITY, usize::MAX, usize::MAX, 1usize, 1usize);
    for r in 1..=cfg.max_tiles {
        for c in 1..=cfg.max_tiles {
            if r * c > cfg.max_tiles {
                continue;
            }
            let dist = ((c as f64 / r as f64) / aspect).ln().abs();
            let key = (dist, r * c, r, r, c);
            if key.0 < best.0
                || (key.0 == best.0 && (key.1 < best.1 || (key.1 == best.1 && key.2 < best.2)))
            {
                best = key;
            }
        }
    }
    let (_, _, _, r, c) = best;
    TileLayout {
        grid_rows: r,
        grid_cols: c,
        includes_thumbnail: cfg.use_thumbnail && r * c > 1,
    }
}

/// Flatten a base-resolution tile into per-patch pixel vectors and project
/// them to the embedding width.
pub fn patchify(tape: &Tape, tile: &Image, cfg: &VisionConfig, store: &ParameterStore) -> Result<PatchGrid> {
    if tile.width() != cfg.base_resolution || tile.height() != cfg.base_resolution {
        return Err(Error::Dimension(format!(
            "patchify expects a {0}x{0} tile, got {1}x{2}",
            cfg.base_resolution,
            tile.width(),
            tile.height()
        )));
    }
    let side = cfg.patches_per_side();
    let p = cfg.patch_size;
    let pdim = cfg.patch_dim();
    let mut data = Vec::with_capacity(side * side * pdim);
    for pr in 0..side {
        for pc in 0..side {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..IMG_CHANNELS {
                        data.push(tile.get(pc * p + px, pr * p + py, ch));
                    }
                }
            }
        }
    }
    let patches = Tensor::new(vec![side * side, pdim], data)?;
    let proj = tape.matmul(&patches, &store.get("vision.patch_proj.w")?)?;
    let embedded = tape.add_bias(&proj, &store.get("vision.patch_proj.b")?)?;
    Ok(PatchGrid {
        rows: side,
        cols: side,
        embeddings: embedded,
    })
}

/// Merge each 2×2 patch neighborhood into one token of 4× channel width.
///
/// Output token `(i, j)` is the channel concatenation of input tokens
/// `(2i,2j), (2i,2j+1), (2i+1,2j), (2i+1,2j+1)`, in that order.
pub fn pixel_shuffle(tape: &Tape, pg: &PatchGrid) -> Result<Tensor> {
    if pg.rows % 2 != 0 || pg.cols % 2 != 0 {
        return Err(Error::Dimension(format!(
            "pixel shuffle needs even patch extents, got {}x{}",
            pg.rows, pg.cols
        )));
    }
    let (n, d) = pg.embeddings.dims2()?;
    if n != pg.rows * pg.cols {
        return Err(Error::Dimension(format!(
            "patch grid {}x{} does not match {} embedding rows",
            pg.rows, pg.cols, n
        )));
    }
    let mut perm = Vec::with_capacity(n);
    for i in 0..pg.rows / 2 {
        for j in 0..pg.cols / 2 {
            perm.push((2 * i) * pg.cols + 2 * j);
            perm.push((2 * i) * pg.cols + 2 * j + 1);
            perm.push((2 * i + 1) * pg.cols + 2 * j);
            perm.push((2 * i + 1) * pg.cols + 2 * j + 1);
        }
    }
    let gathered = tape.gather(&pg.embeddings, &perm)?;
    tape.reshape(&gathered, vec![n / 4, 4 * d])
}

/// Patch-embed one tile and run it through all blocks and the final norm.
fn encode_tile_tokens(tape: &Tape, tile: &Image, cfg: &VisionConfig, store: &ParameterStore) -> Result<Tensor> {
    let pg = patchify(tape, tile, cfg, store)?;
    let mut x = tape.add(&pg.embeddings, &store.get("vision.pos_embed")?)?;
    for b in 0..cfg.depth {
        x = block_forward(tape, &x, store, &format!("vision.block{b}"), cfg.heads, false)?;
    }
    tape.layer_norm(
        &x,
        &store.get("vision.ln_f.gamma")?,
        &store.get("vision.ln_f.beta")?,
        LAYER_NORM_EPS,
    )
}

/// Split an image into layout tiles at base resolution, row-major, with the
/// optional thumbnail tile appended last.
pub fn tile_images(image: &Image, layout: &TileLayout, cfg: &VisionConfig) -> Result<Vec<Image>> {
    let base = cfg.base_resolution;
    let resized = image.resize_bilinear(layout.grid_cols * base, layout.grid_rows * base);
    let mut tiles = Vec::with_capacity(layout.tile_count());
    for r in 0..layout.grid_rows {
        for c in 0..layout.grid_cols {
            tiles.push(resized.crop(c * base, r * base, base, base)?);
        }
    }
    if layout.includes_thumbnail {
        tiles.push(image.resize_bilinear(base, base));
    }
    Ok(tiles)
}

/// Full encoder: tiling, per-tile ViT, pixel shuffle, tile-major concat.
pub fn encode_image(tape: &Tape, image: &Image, cfg: &VisionConfig, store: &ParameterStore) -> Result<Tensor> {
    let layout = select_tile_grid(image.width(), image.height(), cfg);
    let tiles = tile_images(image, &layout, cfg)?;
    let mut parts = Vec::with_capacity(tiles.len());
    for tile in &tiles {
        let tokens = encode_tile_tokens(tape, tile, cfg, store)?;
        let pg = PatchGrid {
            rows: cfg.patches_per_side(),
            cols: cfg.patches_per_side(),
            embeddings: tokens,
        };
        parts.push(pixel_shuffle(tape, &pg)?);
    }
    if parts.len() == 1 {
        Ok(parts.pop().expect("one tile"))
    } else {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tape.concat_rows(&refs)
    }
}

/// Mean over the final block's token outputs, before pixel shuffle. This is
/// the frozen-backbone feature the linear probe consumes.
pub fn pooled_features(tape: &Tape, image: &Image, cfg: &VisionConfig, store: &ParameterStore) -> Result<Tensor> {
    let layout = select_tile_grid(image.width(), image.height(), cfg);
    if layout.tile_count() != 1 {
        return Err(Error::Contract(format!(
            "pooled_features expects a single-tile input, image {}x{} maps to {} tiles",
            image.width(),
            image.height(),
            layout.tile_count()
        )));
    }
    let tile = image.resize_bilinear(cfg.base_resolution, cfg.base_resolution);
    let tokens = encode_tile_tokens(tape, &tile, cfg, store)?;
    tape.mean_rows(&tokens)
}

/// Insert all vision-group parameters.
pub fn init_vision_params(store: &mut ParameterStore, cfg: &VisionConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let pdim = cfg.patch_dim();
    let e = cfg.embed_dim;
    store.insert(
        "vision.patch_proj.w",
        ParamGroup::Vision,
        vec![pdim, e],
        seeded_uniform(seed, "vision.patch_proj.w", pdim * e, pdim),
    )?;
    store.insert("vision.patch_proj.b", ParamGroup::Vision, vec![e], vec![0.0; e])?;
    let n = cfg.patches_per_tile();
    store.insert(
        "vision.pos_embed",
        ParamGroup::Vision,
        vec![n, e],
        seeded_uniform(seed, "vision.pos_embed", n * e, e),
    )?;
    for b in 0..cfg.depth {
        init_block(store, &format!("vision.block{b}"), ParamGroup::Vision, e, seed)?;
    }
    store.insert("vision.ln_f.gamma", ParamGroup::Vision, vec![e], vec![1.0; e])?;
    store.insert("vision.ln_f.beta", ParamGroup::Vision, vec![e], vec![0.0; e])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Precision;

    fn desk_store(seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new(Precision::F64);
        init_vision_params(&mut store, &VisionConfig::desk(), seed).unwrap();
        store
    }

    #[test]
    fn single_tile_for_base_sized_images() {
        let cfg = VisionConfig {
            base_resolution: 448,
            patch_size: 14,
            ..VisionConfig::desk()
        };
        let l = select_tile_grid(448, 448, &cfg);
        assert_eq!((l.grid_rows, l.grid_cols, l.tile_count()), (1, 1, 1));
    }

    #[test]
    fn wide_images_pick_wide_grids() {
        let cfg = VisionConfig {
            base_resolution: 448,
            patch_size: 14,
            ..VisionConfig::desk()
        };
        let l = select_tile_grid(896, 448, &cfg);
        assert_eq!((l.grid_rows, l.grid_cols), (1, 2));
        let l = select_tile_grid(2000, 500, &cfg);
        assert_eq!((l.grid_rows, l.grid_cols), (1, 4));
    }

    #[test]
    fn degenerate_one_pixel_image_maps_to_single_tile() {
        let cfg = VisionConfig::desk();
        let l = select_tile_grid(1, 1, &cfg);
        assert_eq!(l.tile_count(), 1);
    }

    #[test]
    fn token_counts_match_fixed_arithmetic() {
        let paper = VisionConfig {
            base_resolution: 448,
            patch_size: 14,
            ..VisionConfig::desk()
        };
        assert_eq!(paper.patches_per_tile(), 1024);
        assert_eq!(paper.tokens_per_tile(), 256);
        let desk = VisionConfig::desk();
        assert_eq!(desk.patches_per_tile(), 64);
        assert_eq!(desk.tokens_per_tile(), 16);
    }

    #[test]
    fn zero_image_with_zero_bias_embeds_to_zero() {
        let store = desk_store(1);
        let cfg = VisionConfig::desk();
        let tape = Tape::new(Precision::F64);
        let pg = patchify(&tape, &Image::zeros(32, 32), &cfg, &store).unwrap();
        assert!(pg.embeddings.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_wrong_extents() {
        let store = desk_store(1);
        let cfg = VisionConfig::desk();
        let tape = Tape::new(Precision::F64);
        assert!(matches!(
            patchify(&tape, &Image::zeros(16, 32), &cfg, &store),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pixel_shuffle_two_by_two_single_group() {
        let tape = Tape::new(Precision::F64);
        let pg = PatchGrid {
            rows: 2,
            cols: 2,
            embeddings: Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        let out = pixel_shuffle(&tape, &pg).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_rejects_odd_grids() {
        let tape = Tape::new(Precision::F64);
        let pg = PatchGrid {
            rows: 3,
            cols: 2,
            embeddings: Tensor::new(vec![6, 1], vec![0.0; 6]).unwrap(),
        };
        assert!(matches!(pixel_shuffle(&tape, &pg), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooled_features_average_token_rows() {
        let store = desk_store(5);
        let cfg = VisionConfig::desk();
        let tape = Tape::new(Precision::F64);
        let mut img = Image::zeros(32, 32);
        img.set_rgb(3, 7, [0.9, 0.1, 0.4]);
        img.set_rgb(20, 25, [0.0, 1.0, 0.2]);
        let pooled = pooled_features(&tape, &img, &cfg, &store).unwrap();
        let tile = img.resize_bilinear(32, 32);
        let tokens = encode_tile_tokens(&tape, &tile, &cfg, &store).unwrap();
        let (n, d) = tokens.dims2().unwrap();
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += tokens.data()[i * d + j];
            }
            assert!((pooled.data()[j] - s / n as f64).abs() < 1e-12);
        }
    }
}
