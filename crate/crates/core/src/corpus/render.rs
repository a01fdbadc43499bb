use super::scene::{SceneObject, SceneSpec, Shape, Size, Style, GRID};
use crate::tensor::Tensor;

fn style_transform(style: Style, c: [f32; 3]) -> [f32; 3] {
    let out = match style {
        Style::Plain => c,
        Style::Night => [c[0] * 0.45, c[1] * 0.45 + 0.02, c[2] * 0.45 + 0.12],
        Style::Sunset => [c[0] * 0.8 + 0.2, c[1] * 0.8 + 0.06, c[2] * 0.7],
        Style::Foggy => [
            c[0] * 0.6 + 0.3,
            c[1] * 0.6 + 0.3,
            c[2] * 0.6 + 0.312,
        ],
    };
    out.map(|v| v.clamp(0.0, 1.0))
}

fn point_in_polygon(px: f32, py: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Whether offset `(dx, dy)` from the object centre lies inside the shape.
fn covers(shape: Shape, r: f32, dx: f32, dy: f32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        Shape::Triangle => {
            // apex up; y grows downwards
            dy >= -r && dy <= 0.8 * r && dx.abs() <= (dy + r) / 1.8 * 1.1
        }
        Shape::Star => {
            let poly: Vec<(f32, f32)> = (0..10)
                .map(|k| {
                    let rad = if k % 2 == 0 { r * 1.05 } else { r * 0.45 };
                    let a = -std::f32::consts::FRAC_PI_2 + k as f32 * std::f32::consts::PI / 5.0;
                    (rad * a.cos(), rad * a.sin())
                })
                .collect();
            point_in_polygon(dx, dy, &poly)
        }
    }
}

/// Pixel-space centre and radius of an object at the given resolution.
pub fn object_geometry(obj: &SceneObject, resolution: usize) -> (f32, f32, f32) {
    let cell = resolution as f32 / GRID as f32;
    let cx = (obj.cell.1 as f32 + 0.5) * cell;
    let cy = (obj.cell.0 as f32 + 0.5) * cell;
    let r = match obj.size {
        Size::Small => 0.28 * cell,
        Size::Large => 0.45 * cell,
    };
    (cx, cy, r)
}

/// Rasterizes a scene into a `[1, 3, R, R]` image with values in `[-1, 1]`.
pub fn render_scene(spec: &SceneSpec, resolution: usize) -> Tensor<f32> {
    let n = resolution * resolution;
    let mut rgb = vec![spec.background.rgb(); n];
    for obj in &spec.objects {
        let (cx, cy, r) = object_geometry(obj, resolution);
        let color = obj.color.rgb();
        let lo_y = ((cy - r - 1.0).floor().max(0.0)) as usize;
        let hi_y = ((cy + r + 1.0).ceil() as usize).min(resolution);
        let lo_x = ((cx - r - 1.0).floor().max(0.0)) as usize;
        let hi_x = ((cx + r + 1.0).ceil() as usize).min(resolution);
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if covers(obj.shape, r, dx, dy) {
                    rgb[y * resolution + x] = color;
                }
            }
        }
    }
    let mut data = vec![0f32; 3 * n];
    for (i, px) in rgb.iter().enumerate() {
        let c = style_transform(spec.style, *px);
        for ch in 0..3 {
            data[ch * n + i] = c[ch] * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(&[1, 3, resolution, resolution], data).unwrap()
}
