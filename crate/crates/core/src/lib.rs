//! A self-contained CPU segmentation engine.
//!
//! The crate implements the classic U-shaped encoder-decoder segmentation
//! network from first principles: a dense 4-D tensor type with reverse-mode
//! automatic differentiation over exactly the operator set the architecture
//! needs, valid-convolution size arithmetic, the pixel-weighted cross-entropy
//! loss with separation-border weight maps, elastic-deformation augmentation,
//! overlap-tile inference with mirror extrapolation, and the raster/checkpoint
//! formats plus the training loop that tie it all together. No external
//! machine-learning framework is involved.
//!
//! ```
//! use rand::SeedableRng;
//! use unet_core::arch::{UNet, UNetConfig};
//! use unet_core::tensor::Tensor4;
//!
//! let config = UNetConfig { depth: 1, base_channels: 2, in_channels: 1, num_classes: 2, dropout_rate: 0.0 };
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let net: UNet<f32> = UNet::build(&config, &mut rng);
//! let logits = net.forward(&Tensor4::zeros(1, 1, 20, 20)).unwrap();
//! assert_eq!(logits.shape().c, 2);
//! ```

pub mod arch;
pub mod augment;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod params;
pub mod raster;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape4, Tensor4};
