//! Deterministic SVG rendering of BEV frames.

use std::fmt::Write as _;

use fastmap::heatmap::Heatmap;
use fastmap::sampler::SampledPriors;
use fastmap::{BevGridSpec, BevRange, MapClass, MapInstance, Point2};

const GRID_STEP: f64 = 5.0;
/// Heatmap cells below this are not drawn.
const HEAT_FLOOR: f64 = 0.05;

pub fn class_color(c: MapClass) -> &'static str {
    match c {
        MapClass::Divider => "#e67e22",
        MapClass::PedCrossing => "#2471a3",
        MapClass::Boundary => "#229954",
    }
}

/// BEV canvas with `x` to the right and `y` up.
pub struct Canvas {
    range: BevRange,
    scale: f64,
    body: String,
}

impl Canvas {
    pub fn new(range: BevRange, scale: f64) -> Self {
        Self { range, scale, body: String::new() }
    }

    fn px(&self, p: Point2) -> (f64, f64) {
        ((p.x - self.range.x_min) * self.scale, (self.range.y_max - p.y) * self.scale)
    }

    fn width(&self) -> f64 {
        self.range.x_extent() * self.scale
    }

    fn height(&self) -> f64 {
        self.range.y_extent() * self.scale
    }

    /// Frame plus grid lines every 5 m.
    pub fn frame(&mut self) {
        let (w, h) = (self.width(), self.height());
        let _ = writeln!(self.body, r##"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="#ffffff" stroke="#333333" stroke-width="1"/>"##);
        let _ = writeln!(self.body, r##"<g stroke="#dddddd" stroke-width="0.5">"##);
        let mut x = (self.range.x_min / GRID_STEP).ceil() * GRID_STEP;
        while x <= self.range.x_max {
            let (px, _) = self.px(Point2::new(x, 0.0));
            let _ = writeln!(self.body, r#"<line x1="{px:.2}" y1="0" x2="{px:.2}" y2="{h:.2}"/>"#);
            x += GRID_STEP;
        }
        let mut y = (self.range.y_min / GRID_STEP).ceil() * GRID_STEP;
        while y <= self.range.y_max {
            let (_, py) = self.px(Point2::new(0.0, y));
            let _ = writeln!(self.body, r#"<line x1="0" y1="{py:.2}" x2="{w:.2}" y2="{py:.2}"/>"#);
            y += GRID_STEP;
        }
        self.body.push_str("</g>\n");
    }

    /// One rectangle per cell and class above the floor, opacity = value.
    pub fn heatmap(&mut self, hm: &Heatmap, spec: &BevGridSpec) {
        let cell = spec.resolution * self.scale;
        self.body.push_str("<g stroke=\"none\">\n");
        for class in MapClass::ALL {
            for row in 0..spec.h {
                for col in 0..spec.w {
                    let v = hm.get(class, row, col);
                    if v < HEAT_FLOOR {
                        continue;
                    }
                    let x = col as f64 * cell;
                    let y = (spec.h - 1 - row) as f64 * cell;
                    let _ = writeln!(
                        self.body,
                        r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}" fill-opacity="{v:.3}"/>"#,
                        class_color(class)
                    );
                }
            }
        }
        self.body.push_str("</g>\n");
    }

    pub fn priors(&mut self, priors: &SampledPriors) {
        self.body.push_str("<g stroke=\"#000000\" stroke-width=\"0.3\">\n");
        for (k, class) in priors.classes.iter().enumerate() {
            let p = self.range.denormalize(Point2::new(priors.coords[[k, 0]], priors.coords[[k, 1]]));
            let (x, y) = self.px(p);
            let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}"/>"#, class_color(*class));
        }
        self.body.push_str("</g>\n");
    }

    /// Solid for ground truth, dashed for predictions.
    pub fn instance(&mut self, inst: &MapInstance, dashed: bool) {
        let mut d = String::new();
        for (k, p) in inst.points().iter().enumerate() {
            let (x, y) = self.px(*p);
            let _ = write!(d, "{}{x:.2},{y:.2} ", if k == 0 { "M" } else { "L" });
        }
        if inst.closed() {
            d.push('Z');
        }
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"{dash} data-class="{}"/>"#,
            d.trim_end(),
            class_color(inst.class()),
            inst.class().name()
        );
    }

    pub fn finish(self) -> String {
        let (w, h) = (self.width(), self.height());
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.2} {h:.2}\">\n{}</svg>\n",
            self.body
        )
    }
}
