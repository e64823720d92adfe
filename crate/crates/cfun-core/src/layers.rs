//! Composite neural building blocks over the autodiff graph.
//!
//! Each block comes as a pair: `init_*` registers its parameters under a
//! name prefix (deterministic order, Kaiming kernels, zero biases,
//! ones/zeros norm affine), and the builder function replays the block on a
//! [`Graph`] reading those parameters back. Normalization is instance-style
//! (per-channel spatial statistics) since training runs at batch size 1.

use crate::graph::{Graph, Var};
use crate::kernels::ConvSpec;
use crate::params::ParamStore;
use crate::rng::SplitMix64;

pub const NORM_EPS: f32 = 1e-5;

/// Registers a convolution with optional normalization affine parameters.
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    cin: usize,
    cout: usize,
    k: [usize; 3],
    norm: bool,
) {
    store.register_kaiming(&format!("{name}.w"), &[cout, cin, k[0], k[1], k[2]], rng);
    store.register_zeros(&format!("{name}.b"), &[cout]);
    if norm {
        store.register_ones(&format!("{name}.scale"), &[cout]);
        store.register_zeros(&format!("{name}.shift"), &[cout]);
    }
}

/// Convolution -> optional instance norm -> optional relu.
pub fn conv(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    spec: ConvSpec,
    norm: bool,
    relu: bool,
) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let mut y = g.conv3d(x, w, b, spec);
    if norm {
        let scale = g.param(store, &format!("{name}.scale"));
        let shift = g.param(store, &format!("{name}.shift"));
        y = g.instance_norm(y, scale, shift, NORM_EPS);
    }
    if relu {
        y = g.relu(y);
    }
    y
}

/// Registers a transposed convolution; weight layout (Cin, Cout, kz, ky, kx).
pub fn init_deconv(
    store: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    cin: usize,
    cout: usize,
    k: [usize; 3],
    norm: bool,
) {
    store.register_kaiming(&format!("{name}.w"), &[cin, cout, k[0], k[1], k[2]], rng);
    store.register_zeros(&format!("{name}.b"), &[cout]);
    if norm {
        store.register_ones(&format!("{name}.scale"), &[cout]);
        store.register_zeros(&format!("{name}.shift"), &[cout]);
    }
}

/// Transposed convolution -> optional instance norm -> optional relu.
pub fn deconv(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    spec: ConvSpec,
    norm: bool,
    relu: bool,
) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let mut y = g.deconv3d(x, w, b, spec);
    if norm {
        let scale = g.param(store, &format!("{name}.scale"));
        let shift = g.param(store, &format!("{name}.shift"));
        y = g.instance_norm(y, scale, shift, NORM_EPS);
    }
    if relu {
        y = g.relu(y);
    }
    y
}

pub fn init_linear(
    store: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    cin: usize,
    cout: usize,
) {
    store.register_kaiming(&format!("{name}.w"), &[cout, cin], rng);
    store.register_zeros(&format!("{name}.b"), &[cout]);
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var, relu: bool) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let mut y = g.linear(x, w, b);
    if relu {
        y = g.relu(y);
    }
    y
}

fn p3d_mid(cout: usize) -> usize {
    (cout / 4).max(2)
}

/// Registers a serial P3D bottleneck: 1x1x1 reduce, 1x3x3 in-plane conv,
/// 3x1x1 axial conv, 1x1x1 expand, plus a projection shortcut when the
/// shape changes.
pub fn init_p3d(
    store: &mut ParamStore,
    rng: &mut SplitMix64,
    name: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) {
    let mid = p3d_mid(cout);
    init_conv(
        store,
        rng,
        &format!("{name}.reduce"),
        cin,
        mid,
        [1, 1, 1],
        true,
    );
    init_conv(
        store,
        rng,
        &format!("{name}.spatial"),
        mid,
        mid,
        [1, 3, 3],
        true,
    );
    init_conv(
        store,
        rng,
        &format!("{name}.axial"),
        mid,
        mid,
        [3, 1, 1],
        true,
    );
    init_conv(
        store,
        rng,
        &format!("{name}.expand"),
        mid,
        cout,
        [1, 1, 1],
        true,
    );
    if cin != cout || stride != 1 {
        init_conv(
            store,
            rng,
            &format!("{name}.proj"),
            cin,
            cout,
            [1, 1, 1],
            false,
        );
    }
}

/// Builds the bottleneck; `stride` downsamples all three axes (the in-plane
/// conv carries the (y, x) stride, the axial conv the z stride).
pub fn p3d_bottleneck(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Var {
    let s = stride;
    let reduce = conv(
        g,
        store,
        &format!("{name}.reduce"),
        x,
        ConvSpec::unit(),
        true,
        true,
    );
    let spatial = conv(
        g,
        store,
        &format!("{name}.spatial"),
        reduce,
        ConvSpec {
            stride: [1, s, s],
            pad: [0, 1, 1],
        },
        true,
        true,
    );
    let axial = conv(
        g,
        store,
        &format!("{name}.axial"),
        spatial,
        ConvSpec {
            stride: [s, 1, 1],
            pad: [1, 0, 0],
        },
        true,
        true,
    );
    let main = conv(
        g,
        store,
        &format!("{name}.expand"),
        axial,
        ConvSpec::unit(),
        true,
        false,
    );
    let shortcut = if cin != cout || s != 1 {
        conv(
            g,
            store,
            &format!("{name}.proj"),
            x,
            ConvSpec {
                stride: [s, s, s],
                pad: [0, 0, 0],
            },
            false,
            false,
        )
    } else {
        x
    };
    let sum = g.add(main, shortcut);
    g.relu(sum)
}
