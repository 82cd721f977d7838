//! Parameter counts derived from the channel plan alone, independent of the
//! layer construction in `net`.

use super::attention::{sa_param_count, SaConfig};
use super::spec::{ModelSpec, Variant, DEPTH};

/// `c_in·c_out·k² + c_out`.
pub fn conv_param_count(c_in: u64, c_out: u64, k: u64) -> u64 {
    c_in * c_out * k * k + c_out
}

fn double(c_in: u64, c_out: u64) -> u64 {
    conv_param_count(c_in, c_out, 3) + conv_param_count(c_out, c_out, 3)
}

/// Exact scalar parameter count of the model `spec` describes.
pub fn analytic_param_count(spec: &ModelSpec) -> u64 {
    let e = spec.encoder_channels.map(|c| c as u64);
    let d = spec.decoder_channels.map(|c| c as u64);
    let bott = spec.bottleneck_channels as u64;
    let cin = spec.in_channels_per_modality as u64;

    let chain = |first: u64, inputs_after: &[u64; DEPTH]| -> u64 {
        (0..DEPTH)
            .map(|i| double(if i == 0 { first } else { inputs_after[i - 1] }, e[i]))
            .sum()
    };

    let (encoder, skip): (u64, [u64; DEPTH]) = match spec.variant {
        Variant::Unet | Variant::UnetSa => (chain(cin, &e) + double(e[4], bott), e),
        Variant::EarlyFuse => (chain(2 * cin, &e) + double(e[4], bott), e),
        Variant::LateFuse => (2 * chain(cin, &e) + 2 * double(e[4], bott / 2), e),
        Variant::FuseAdd => (2 * chain(cin, &e) + double(e[4], bott), e),
        Variant::FuseOrigin | Variant::FuseUnet | Variant::FuseUnetSa | Variant::Proposed => {
            let fused = e.map(|c| 2 * c);
            (chain(cin, &fused) + chain(cin, &e) + double(fused[4], bott), fused)
        }
    };

    let decoder: u64 = (0..DEPTH)
        .map(|i| {
            let below = if i == DEPTH - 1 { bott } else { d[i + 1] };
            4 * below * d[i] + d[i] + double(skip[i] + d[i], d[i])
        })
        .sum::<u64>()
        + conv_param_count(d[0], 1, 1);

    let attention = spec.sa.map_or(0, |sa| {
        let per_stream: u64 = spec
            .encoder_channels
            .iter()
            .map(|&n| {
                sa_param_count(&SaConfig {
                    channels: n,
                    reduction: sa.reduction,
                    dilation: sa.dilation,
                })
            })
            .sum();
        let streams = if spec.variant == Variant::FuseUnetSa { 2 } else { 1 };
        streams * per_stream
    });

    encoder + decoder + attention
}
