use groupvq::autoencoder::{recon_grad, Autoencoder, AutoencoderConfig, AutoencoderGrads};
use groupvq::numerics::{finite_difference_grad, max_relative_error, RngStream, Tensor};

fn tiny_config() -> AutoencoderConfig {
    AutoencoderConfig {
        dim: 3,
        enc_hidden: vec![],
        dec_hidden: vec![4],
    }
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed, 0);
    Tensor::from_vec(&[b, h, w, 3], (0..b * h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
}

fn ae_loss(ae: &Autoencoder<f64>, imgs: &Tensor<f64>) -> f64 {
    let (z, _) = ae.encode_batch(imgs).unwrap();
    let (r, _) = ae.decode_batch(&z).unwrap();
    r.sub(imgs).unwrap().map(|v| v * v).mean()
}

fn ae_grads(ae: &Autoencoder<f64>, imgs: &Tensor<f64>) -> AutoencoderGrads<f64> {
    let (z, ec) = ae.encode_batch(imgs).unwrap();
    let (r, dc) = ae.decode_batch(&z).unwrap();
    let (dec, out, dz) = ae.decode_backward(&dc, &recon_grad(imgs, &r).unwrap()).unwrap();
    let enc = ae.encode_backward(&ec, &dz).unwrap();
    AutoencoderGrads { enc, dec, out }
}

fn check_against_fd(cfg: AutoencoderConfig, size: usize, batch: usize) {
    let ae = Autoencoder::<f64>::new(cfg, &mut RngStream::new(3, 5)).unwrap();
    let imgs = images(batch, size, size, 1);
    let grads = ae_grads(&ae, &imgs);
    let named = grads.named();
    for (p, (name, analytic)) in named.iter().enumerate() {
        let numeric = finite_difference_grad(
            |t| {
                let mut probe = ae.clone();
                *probe.params_mut()[p] = t.clone();
                ae_loss(&probe, &imgs)
            },
            ae.named_params()[p].1,
            1e-6,
        )
        .unwrap();
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = max_relative_error(analytic, &numeric, 1e-3 * scale);
        assert!(err <= 1e-5, "{name}: relative error {err}");
    }
}

#[test]
fn tiny_autoencoder_matches_finite_differences() {
    check_against_fd(tiny_config(), 4, 2);
}

#[test]
fn two_level_autoencoder_matches_finite_differences() {
    let cfg = AutoencoderConfig {
        dim: 3,
        enc_hidden: vec![4],
        dec_hidden: vec![4, 3],
    };
    check_against_fd(cfg, 8, 1);
}
