//! A tiny torchvision-layout ResNet archive loads into the backbone and its
//! pyramid matches an unfolded conv + batch-norm recomputation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgjnd::archive;
use sgjnd::backbone::{Backbone, BackboneSpec};
use sgjnd::ImageBuffer;

struct Bn {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

struct Net {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Net {
    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, rng: &mut ChaCha8Rng) {
        let bound = (2.0 / (inp * k * k) as f64).sqrt();
        let w = Array4::from_shape_simple_fn((out, inp, k, k), || rng.gen_range(-bound..bound));
        self.tensors.insert(format!("{name}.weight"), w.into_dyn());
    }

    fn bn(&mut self, name: &str, c: usize, rng: &mut ChaCha8Rng) {
        let mut v = |lo: f64, hi: f64| Array1::from_shape_simple_fn(c, || rng.gen_range(lo..hi)).into_dyn();
        self.tensors.insert(format!("{name}.weight"), v(0.5, 1.5));
        self.tensors.insert(format!("{name}.bias"), v(-0.2, 0.2));
        self.tensors.insert(format!("{name}.running_mean"), v(-0.1, 0.1));
        self.tensors.insert(format!("{name}.running_var"), v(0.5, 2.0));
        self.tensors.insert(format!("{name}.num_batches_tracked"), Array1::from_elem(1, 0.0).into_dyn());
    }

    fn w4(&self, name: &str) -> Array4<f64> {
        self.tensors[&format!("{name}.weight")]
            .clone()
            .into_dimensionality()
            .unwrap()
    }

    fn bn_of(&self, name: &str) -> Bn {
        let g = |n: &str| -> Array1<f64> {
            self.tensors[&format!("{name}.{n}")]
                .clone()
                .into_dimensionality()
                .unwrap()
        };
        Bn {
            gamma: g("weight"),
            beta: g("bias"),
            mean: g("running_mean"),
            var: g("running_var"),
        }
    }
}

/// Direct zero-padded cross-correlation over `[C, H, W]`.
fn conv2d(x: &Array3<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array3<f64> {
    let (c_out, c_in, k, _) = w.dim();
    let (_, h, wd) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Array3::from_shape_fn((c_out, oh, ow), |(o, y, xx)| {
        let mut acc = 0.0;
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w[[o, c, ky, kx]] * x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
        acc
    })
}

fn batch_norm(x: &Array3<f64>, bn: &Bn) -> Array3<f64> {
    Array3::from_shape_fn(x.dim(), |(c, y, xx)| {
        (x[[c, y, xx]] - bn.mean[c]) / (bn.var[c] + 1e-5).sqrt() * bn.gamma[c] + bn.beta[c]
    })
}

fn relu(x: Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

fn max_pool(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    Array3::from_shape_fn((c, oh, ow), |(ch, y, xx)| {
        let mut m = f64::NEG_INFINITY;
        for ky in 0..3 {
            for kx in 0..3 {
                let iy = (y * 2 + ky) as isize - 1;
                let ix = (xx * 2 + kx) as isize - 1;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    m = m.max(x[[ch, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}

fn cbn(net: &Net, conv: &str, bn: &str, x: &Array3<f64>, stride: usize) -> Array3<f64> {
    let w = net.w4(conv);
    let k = w.dim().2;
    batch_norm(&conv2d(x, &w, stride, k / 2), &net.bn_of(bn))
}

/// Stage maps computed from the unfolded tensors.
fn oracle(net: &Net, input: &Array3<f64>) -> Vec<Array3<f64>> {
    let mut stages = Vec::new();
    let stem = relu(cbn(net, "conv1", "bn1", input, 2));
    stages.push(stem.clone());
    let mut x = max_pool(&stem);
    for l in 1..=4 {
        let p = format!("layer{l}.0");
        let stride = if l > 1 { 2 } else { 1 };
        let a = relu(cbn(net, &format!("{p}.conv1"), &format!("{p}.bn1"), &x, 1));
        let b = relu(cbn(net, &format!("{p}.conv2"), &format!("{p}.bn2"), &a, stride));
        let c = cbn(net, &format!("{p}.conv3"), &format!("{p}.bn3"), &b, 1);
        let skip = cbn(net, &format!("{p}.downsample.0"), &format!("{p}.downsample.1"), &x, stride);
        x = relu(c + skip);
        stages.push(x.clone());
    }
    stages
}

fn tiny_resnet(seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Net {
        tensors: BTreeMap::new(),
    };
    net.conv("conv1", 4, 3, 7, &mut rng);
    net.bn("bn1", 4, &mut rng);
    let mut c_in = 4;
    for (l, (mid, out)) in [(2, 6), (3, 8), (3, 10), (4, 12)].into_iter().enumerate() {
        let p = format!("layer{}.0", l + 1);
        net.conv(&format!("{p}.conv1"), mid, c_in, 1, &mut rng);
        net.bn(&format!("{p}.bn1"), mid, &mut rng);
        net.conv(&format!("{p}.conv2"), mid, mid, 3, &mut rng);
        net.bn(&format!("{p}.bn2"), mid, &mut rng);
        net.conv(&format!("{p}.conv3"), out, mid, 1, &mut rng);
        net.bn(&format!("{p}.bn3"), out, &mut rng);
        net.conv(&format!("{p}.downsample.0"), out, c_in, 1, &mut rng);
        net.bn(&format!("{p}.downsample.1"), out, &mut rng);
        c_in = out;
    }
    net
}

#[test]
fn torchvision_archive_matches_unfolded_recomputation() {
    let net = tiny_resnet(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resnet.safetensors");
    archive::save(&path, net.tensors.iter().map(|(k, v)| (k.clone(), v.view()))).unwrap();

    let spec = BackboneSpec::resnet50(&path);
    let bb = Backbone::<f64>::from_spec(&spec, 0).unwrap();
    assert_eq!(bb.stage_widths(), [4, 6, 8, 10, 12]);

    let img = ImageBuffer::from_fn(64, 32, 3, |x, y, c| ((x * 13 + y * 7 + c * 50) % 256) as u8);
    let input = Array3::from_shape_fn((3, 32, 64), |(c, y, x)| {
        (f64::from(img.get(x, y, c)) / 255.0 - spec.mean[c]) / spec.std[c]
    });
    let pyr = bb.extract_pyramid(&img).unwrap();
    let want = oracle(&net, &input);
    assert_eq!(pyr.stages.len(), 5);
    for (k, (got, exp)) in pyr.stages.iter().zip(&want).enumerate() {
        let (c, h, w) = exp.dim();
        assert_eq!((got.shape.height, got.shape.width, got.shape.channels), (h, w, c), "stage {}", k + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let g = got.data[[got.shape.row(0, y, x), ch]];
                    assert!(
                        (g - exp[[ch, y, x]]).abs() <= 1e-9,
                        "stage {} at ({y}, {x}, {ch}): {g} vs {}",
                        k + 1,
                        exp[[ch, y, x]]
                    );
                }
            }
        }
    }
}

#[test]
fn archive_with_a_missing_tensor_is_rejected() {
    let mut net = tiny_resnet(6);
    net.tensors.remove("layer2.0.bn2.running_var");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.safetensors");
    archive::save(&path, net.tensors.iter().map(|(k, v)| (k.clone(), v.view()))).unwrap();
    assert!(Backbone::<f64>::from_spec(&BackboneSpec::resnet50(&path), 0).is_err());
}
