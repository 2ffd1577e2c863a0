//! Closed curves as cyclic particle lists: edge vectors, normals, test shape
//! generators and CSV I/O.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::mesh_ops::{MeshConfig, Vec2};

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("a closed curve needs at least 3 particles, got {0}")]
    TooFewParticles(usize),
    #[error("particle {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("degenerate normal at particle {index}: neighbours coincide")]
    DegenerateNormal { index: usize },
    #[error("invalid shape parameters: {0}")]
    BadParameters(String),
    #[error("shape comes within {distance:.4} of the domain boundary (margin {margin:.4} required)")]
    TooCloseToBoundary { distance: f64, margin: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered cyclic list of particle positions; particle `0` follows particle
/// `n - 1`. The closing point is never repeated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCurve {
    points: Vec<Vec2>,
}

impl ParticleCurve {
    pub fn new(points: Vec<Vec2>) -> Result<Self, ShapeError> {
        if points.len() < 3 {
            return Err(ShapeError::TooFewParticles(points.len()));
        }
        if let Some(index) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(ShapeError::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vec2> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn edge_vectors(&self) -> Vec<Vec2> {
        edge_vectors(&self.points)
    }

    pub fn tangent_vectors(&self) -> Vec<Vec2> {
        tangent_vectors(&self.points)
    }

    pub fn outward_normals(&self) -> Result<Vec<Vec2>, ShapeError> {
        outward_normals(&self.points)
    }

    /// Shoelace area; positive for counterclockwise curves.
    pub fn signed_area(&self) -> f64 {
        signed_area(&self.points)
    }

    pub fn centroid(&self) -> Vec2 {
        let n = self.points.len() as f64;
        let s = self.points.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    }

    /// Relabels so that new particle `i` is old particle `(i + k) mod n`.
    pub fn cyclic_shift(&self, k: usize) -> Self {
        let mut points = self.points.clone();
        points.rotate_left(k % self.points.len());
        Self { points }
    }

    /// Same point set traversed in the opposite direction.
    pub fn reversed(&self) -> Self {
        let mut points = self.points.clone();
        points.reverse();
        Self { points }
    }

    pub fn translated(&self, d: Vec2) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
        }
    }

    /// Smallest distance from any particle to the edge of `[0, lx] x [0, ly]`.
    pub fn boundary_distance(&self, mesh: &MeshConfig) -> f64 {
        self.points
            .iter()
            .map(|p| p[0].min(mesh.lx() - p[0]).min(p[1]).min(mesh.ly() - p[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Errors unless every particle lies at least `margin` inside the domain.
    pub fn check_margin(&self, mesh: &MeshConfig, margin: f64) -> Result<(), ShapeError> {
        let distance = self.boundary_distance(mesh);
        if distance < margin {
            return Err(ShapeError::TooCloseToBoundary { distance, margin });
        }
        Ok(())
    }
}

/// Cyclic backward differences `Q_b - Q_{b-1}`.
pub fn edge_vectors(points: &[Vec2]) -> Vec<Vec2> {
    let n = points.len();
    (0..n)
        .map(|b| {
            let prev = points[(b + n - 1) % n];
            [points[b][0] - prev[0], points[b][1] - prev[1]]
        })
        .collect()
}

/// Centered half differences `(Q_{b+1} - Q_{b-1}) / 2`, the tangent
/// estimate that [`outward_normals`] is orthogonal to.
pub fn tangent_vectors(points: &[Vec2]) -> Vec<Vec2> {
    let n = points.len();
    (0..n)
        .map(|b| {
            let next = points[(b + 1) % n];
            let prev = points[(b + n - 1) % n];
            [0.5 * (next[0] - prev[0]), 0.5 * (next[1] - prev[1])]
        })
        .collect()
}

pub fn signed_area(points: &[Vec2]) -> f64 {
    let n = points.len();
    0.5 * (0..n)
        .map(|b| {
            let p = points[b];
            let q = points[(b + 1) % n];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
}

/// Unit normals from the centered difference `Q_{b+1} - Q_{b-1}` rotated by
/// -90 degrees. The whole set is flipped when the curve runs clockwise, so
/// normals point out of the enclosed region for either orientation.
pub fn outward_normals(points: &[Vec2]) -> Result<Vec<Vec2>, ShapeError> {
    let n = points.len();
    let flip = if signed_area(points) < 0.0 { -1.0 } else { 1.0 };
    (0..n)
        .map(|b| {
            let next = points[(b + 1) % n];
            let prev = points[(b + n - 1) % n];
            let t = [next[0] - prev[0], next[1] - prev[1]];
            let len = t[0].hypot(t[1]);
            if len == 0.0 || !len.is_finite() {
                return Err(ShapeError::DegenerateNormal { index: b });
            }
            Ok([flip * t[1] / len, -flip * t[0] / len])
        })
        .collect()
}

/// Analytic test shapes, sampled counterclockwise at equal parameter steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Circle { radius: f64 },
    Ellipse { semi_x: f64, semi_y: f64 },
    RoundedRectangle { half_width: f64, half_height: f64, corner_radius: f64 },
}

impl ShapeKind {
    fn validate(&self) -> Result<(), ShapeError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            ShapeKind::Circle { radius } if ok(radius) => Ok(()),
            ShapeKind::Ellipse { semi_x, semi_y } if ok(semi_x) && ok(semi_y) => Ok(()),
            ShapeKind::RoundedRectangle {
                half_width,
                half_height,
                corner_radius,
            } if ok(half_width)
                && ok(half_height)
                && corner_radius.is_finite()
                && corner_radius >= 0.0
                && corner_radius <= half_width.min(half_height) =>
            {
                Ok(())
            }
            other => Err(ShapeError::BadParameters(format!("{other:?}"))),
        }
    }

    /// Point at curve parameter `s` in `[0, 1)`, relative to the center.
    fn point(&self, s: f64) -> Vec2 {
        match *self {
            ShapeKind::Circle { radius } => {
                let th = 2.0 * PI * s;
                [radius * th.cos(), radius * th.sin()]
            }
            ShapeKind::Ellipse { semi_x, semi_y } => {
                let th = 2.0 * PI * s;
                [semi_x * th.cos(), semi_y * th.sin()]
            }
            ShapeKind::RoundedRectangle {
                half_width: a,
                half_height: b,
                corner_radius: r,
            } => rounded_rectangle_point(a, b, r, s),
        }
    }
}

/// Arc-length parameterized rounded rectangle starting at `(a, 0)`.
fn rounded_rectangle_point(a: f64, b: f64, r: f64, s: f64) -> Vec2 {
    let sx = a - r;
    let sy = b - r;
    let quarter_arc = 0.5 * PI * r;
    let perimeter = 4.0 * sx + 4.0 * sy + 4.0 * quarter_arc;
    let mut d = s.rem_euclid(1.0) * perimeter;
    // Each quadrant is a half side, a quarter circle, then the next half side.
    for q in 0..4 {
        let (cx, cy) = match q {
            0 => (1.0, 1.0),
            1 => (-1.0, 1.0),
            2 => (-1.0, -1.0),
            _ => (1.0, -1.0),
        };
        let (first, second) = if q % 2 == 0 { (sy, sx) } else { (sx, sy) };
        let start_angle = q as f64 * 0.5 * PI;
        if d <= first {
            let t = d;
            return match q {
                0 => [a, t],
                1 => [-t, b],
                2 => [-a, -t],
                _ => [t, -b],
            };
        }
        d -= first;
        if d <= quarter_arc {
            let th = start_angle + if r > 0.0 { d / r } else { 0.0 };
            return [cx * sx + r * th.cos(), cy * sy + r * th.sin()];
        }
        d -= quarter_arc;
        if d <= second {
            let t = d;
            return match q {
                0 => [sx - t, b],
                1 => [-a, sy - t],
                2 => [-sx + t, -b],
                _ => [a, -sy + t],
            };
        }
        d -= second;
    }
    [a, 0.0]
}

/// Samples `kind` at `n_p` equally spaced parameters around `center` and
/// checks that every particle keeps `margin` from the domain boundary.
pub fn make_shape(
    kind: ShapeKind,
    n_p: usize,
    center: Vec2,
    mesh: &MeshConfig,
    margin: f64,
) -> Result<ParticleCurve, ShapeError> {
    kind.validate()?;
    if n_p < 3 {
        return Err(ShapeError::TooFewParticles(n_p));
    }
    let points = (0..n_p)
        .map(|b| {
            let p = kind.point(b as f64 / n_p as f64);
            [center[0] + p[0], center[1] + p[1]]
        })
        .collect();
    let curve = ParticleCurve::new(points)?;
    curve.check_margin(mesh, margin)?;
    Ok(curve)
}

/// Formats like C's `%.17g`.
pub fn format_g17(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..17).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (16 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes a two-column CSV of vectors, one `%.17g,%.17g` row each.
pub fn write_vectors(path: &Path, header: &str, rows: &[Vec2]) -> Result<(), ShapeError> {
    let mut out = String::with_capacity(48 * rows.len() + 8);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{}", format_g17(r[0]), format_g17(r[1]));
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a two-column CSV written by [`write_vectors`]. The first line is a
/// header of two non-numeric names.
pub fn read_vectors(path: &Path) -> Result<Vec<Vec2>, ShapeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ShapeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_vectors(&text, path)
}

fn parse_vectors(text: &str, path: &Path) -> Result<Vec<Vec2>, ShapeError> {
    let err = |line: usize, message: String| ShapeError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) => {
            let cols: Vec<&str> = h.split(',').map(str::trim).collect();
            if cols.len() != 2 || cols.iter().any(|c| c.is_empty() || c.parse::<f64>().is_ok()) {
                return Err(err(1, format!("expected a two-column header such as `x,y`, got `{h}`")));
            }
        }
        None => return Err(err(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(err(line_no, format!("expected two comma-separated values, got `{line}`")));
        };
        let parse = |s: &str| -> Result<f64, ShapeError> {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("not a number: `{}`", s.trim())))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite value `{}`", s.trim())));
            }
            Ok(v)
        };
        rows.push([parse(a)?, parse(b)?]);
    }
    Ok(rows)
}

pub fn read_curve(path: &Path) -> Result<ParticleCurve, ShapeError> {
    let text = std::fs::read_to_string(path).map_err(|source| ShapeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let points = parse_vectors(&text, path)?;
    if points.len() < 3 {
        return Err(ShapeError::Parse {
            path: path.to_path_buf(),
            line: text.lines().count().max(1),
            message: format!("a closed curve needs at least 3 particles, found {}", points.len()),
        });
    }
    ParticleCurve::new(points)
}

pub fn write_curve(curve: &ParticleCurve, path: &Path) -> Result<(), ShapeError> {
    write_vectors(path, "x,y", curve.points())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ShapeError> {
    let io = |source| ShapeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file_name = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn domain() -> MeshConfig {
        MeshConfig::square(64, 2.0 * PI).unwrap()
    }

    #[test]
    fn unit_square_edges() {
        let c = ParticleCurve::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!(c.edge_vectors(), vec![[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let shifted = c.cyclic_shift(1).edge_vectors();
        assert_eq!(shifted, vec![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]);
    }

    #[test]
    fn circle_generator_points_and_normals() {
        let c = make_shape(ShapeKind::Circle { radius: 0.8 }, 4, [PI, PI], &domain(), 1.6).unwrap();
        let expect = [[PI + 0.8, PI], [PI, PI + 0.8], [PI - 0.8, PI], [PI, PI - 0.8]];
        for (p, e) in c.points().iter().zip(expect) {
            assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15);
        }
        let c = make_shape(ShapeKind::Circle { radius: 1.1 }, 37, [3.0, 2.9], &domain(), 0.5).unwrap();
        let n = c.outward_normals().unwrap();
        for (b, nb) in n.iter().enumerate() {
            let th = 2.0 * PI * b as f64 / 37.0;
            assert!((nb[0] - th.cos()).abs() < 1e-12 && (nb[1] - th.sin()).abs() < 1e-12);
        }
        let spacing: Vec<f64> = c.edge_vectors().iter().map(|e| e[0].hypot(e[1])).collect();
        for s in &spacing {
            assert!((s - spacing[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn ellipse_points_satisfy_implicit_equation() {
        let c = make_shape(ShapeKind::Ellipse { semi_x: 1.2, semi_y: 0.6 }, 100, [PI, PI], &domain(), 1.6)
            .unwrap();
        for p in c.points() {
            let x = (p[0] - PI) / 1.2;
            let y = (p[1] - PI) / 0.6;
            assert!((x * x + y * y - 1.0).abs() < 1e-12);
        }
        let e = make_shape(ShapeKind::Ellipse { semi_x: 0.7, semi_y: 0.7 }, 12, [3.0, 3.0], &domain(), 1.0)
            .unwrap();
        let ci = make_shape(ShapeKind::Circle { radius: 0.7 }, 12, [3.0, 3.0], &domain(), 1.0).unwrap();
        assert_eq!(e, ci);
    }

    #[test]
    fn rounded_rectangle_is_closed_and_ccw() {
        let kind = ShapeKind::RoundedRectangle {
            half_width: 1.0,
            half_height: 0.5,
            corner_radius: 0.2,
        };
        let c = make_shape(kind, 80, [PI, PI], &domain(), 1.0).unwrap();
        assert!(c.signed_area() > 0.0);
        let spacing: Vec<f64> = c.edge_vectors().iter().map(|e| e[0].hypot(e[1])).collect();
        let max = spacing.iter().cloned().fold(0.0, f64::max);
        let min = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.05);
        for p in c.points() {
            assert!((p[0] - PI).abs() <= 1.0 + 1e-12 && (p[1] - PI).abs() <= 0.5 + 1e-12);
        }
        let normals = c.outward_normals().unwrap();
        for (p, n) in c.points().iter().zip(&normals) {
            assert!(n[0] * (p[0] - PI) + n[1] * (p[1] - PI) > 0.0);
        }
    }

    #[test]
    fn generator_rejects_bad_input() {
        let d = domain();
        assert!(matches!(
            make_shape(ShapeKind::Circle { radius: 2.5 }, 20, [PI, PI], &d, 1.6),
            Err(ShapeError::TooCloseToBoundary { .. })
        ));
        assert!(make_shape(ShapeKind::Circle { radius: -1.0 }, 20, [PI, PI], &d, 0.0).is_err());
        assert!(make_shape(ShapeKind::Circle { radius: 1.0 }, 2, [PI, PI], &d, 0.0).is_err());
        let bad = ShapeKind::RoundedRectangle {
            half_width: 1.0,
            half_height: 0.5,
            corner_radius: 0.6,
        };
        assert!(make_shape(bad, 20, [PI, PI], &d, 0.0).is_err());
    }

    #[test]
    fn reflection_and_orientation_of_normals() {
        let c = make_shape(ShapeKind::Ellipse { semi_x: 1.0, semi_y: 0.5 }, 30, [PI, PI], &domain(), 1.0)
            .unwrap();
        let n = c.outward_normals().unwrap();
        let mirrored = ParticleCurve::new(c.points().iter().map(|p| [2.0 * PI - p[0], p[1]]).collect()).unwrap();
        let nm = mirrored.outward_normals().unwrap();
        for (a, b) in n.iter().zip(&nm) {
            assert!((a[0] + b[0]).abs() < 1e-14 && (a[1] - b[1]).abs() < 1e-14);
        }
        let nr = c.reversed().outward_normals().unwrap();
        for (b, nb) in nr.iter().enumerate() {
            let orig = n[29 - b];
            assert!((nb[0] - orig[0]).abs() < 1e-14 && (nb[1] - orig[1]).abs() < 1e-14);
        }
        for v in &n {
            assert!((v[0].hypot(v[1]) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_normal_names_particle() {
        let c = ParticleCurve::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [2.0, 1.0]]).unwrap();
        match c.outward_normals() {
            Err(ShapeError::DegenerateNormal { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normals_are_orthogonal_to_tangents() {
        let c = make_shape(ShapeKind::Ellipse { semi_x: 1.2, semi_y: 0.6 }, 50, [PI, PI], &domain(), 1.0)
            .unwrap();
        let t = c.tangent_vectors();
        for (n, t) in c.outward_normals().unwrap().iter().zip(&t) {
            assert!((n[0] * t[0] + n[1] * t[1]).abs() < 1e-15);
        }
        let s = t.iter().fold([0.0, 0.0], |a, e| [a[0] + e[0], a[1] + e[1]]);
        assert!(s[0].abs() < 1e-14 && s[1].abs() < 1e-14);
    }

    #[test]
    fn edge_sum_vanishes() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(3..40);
            let pts: Vec<Vec2> = (0..n).map(|_| [rng.random_range(0.0..6.0), rng.random_range(0.0..6.0)]).collect();
            let s = edge_vectors(&pts).iter().fold([0.0, 0.0], |a, e| [a[0] + e[0], a[1] + e[1]]);
            assert!(s[0].abs() < 1e-14 && s[1].abs() < 1e-14);
        }
    }

    #[test]
    fn g17_matches_c_formatting() {
        assert_eq!(format_g17(0.8), "0.80000000000000004");
        assert_eq!(format_g17(1.0), "1");
        assert_eq!(format_g17(-2.5), "-2.5");
        assert_eq!(format_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(format_g17(1.5e20), "1.5e+20");
        assert_eq!(format_g17(PI), "3.1415926535897931");
        assert_eq!(format_g17(0.0), "0");
        assert_eq!(format_g17(123456.0), "123456");
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let mut rng = StdRng::seed_from_u64(10);
        let pts: Vec<Vec2> = (0..25).map(|_| [rng.random_range(0.0..6.0), rng.random_range(-1e-7..1e3)]).collect();
        let c = ParticleCurve::new(pts).unwrap();
        write_curve(&c, &path).unwrap();
        assert_eq!(read_curve(&path).unwrap(), c);

        std::fs::write(&path, "x,y\n0,0\n1,0\n0,1\n").unwrap();
        assert_eq!(read_curve(&path).unwrap().len(), 3);

        std::fs::write(&path, "x,y\n0,0\n1,0\n").unwrap();
        assert!(matches!(read_curve(&path), Err(ShapeError::Parse { .. })));

        std::fs::write(&path, "x,y\n0,0\n1,zz\n0,1\n").unwrap();
        match read_curve(&path) {
            Err(ShapeError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "x,y\n0,0\n1,inf\n0,1\n").unwrap();
        assert!(matches!(read_curve(&path), Err(ShapeError::Parse { line: 3, .. })));
        std::fs::write(&path, "x,y\n0,0,1\n1,0\n0,1\n").unwrap();
        assert!(matches!(read_curve(&path), Err(ShapeError::Parse { line: 2, .. })));
        assert!(matches!(read_curve(&dir.path().join("missing.csv")), Err(ShapeError::Io { .. })));
    }
}
