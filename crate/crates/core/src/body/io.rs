//! Text layout of a body template file:
//!
//! ```text
//! humanrf-body 1
//! vertices N        then N lines: x y z
//! weights N K       then N lines: K weights
//! joints K          then K lines: parent x y z   (parent -1 for the root)
//! triangles T       then T lines: i j k
//! shape S           then per coefficient N vertex lines, K joint lines: dx dy dz
//! ```

use std::io::{BufRead, Write};

use super::{BodyError, BodyTemplate};
use crate::geometry::Vec3;

const HEADER: &str = "humanrf-body 1";

impl BodyTemplate {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let (n, k) = (self.num_vertices(), self.num_joints());
        writeln!(w, "{HEADER}")?;
        writeln!(w, "vertices {n}")?;
        for v in &self.vertices {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
        writeln!(w, "weights {n} {k}")?;
        for row in self.weights.chunks(k) {
            let s: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}", s.join(" "))?;
        }
        writeln!(w, "joints {k}")?;
        for (p, j) in self.parents.iter().zip(&self.joints) {
            let p = p.map_or(-1, |p| p as i64);
            writeln!(w, "{p} {} {} {}", j.x, j.y, j.z)?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(w, "shape {}", self.num_betas())?;
        for (vd, jd) in self.shape_dirs.iter().zip(&self.joint_shape_dirs) {
            for d in vd.iter().chain(jd) {
                writeln!(w, "{} {} {}", d.x, d.y, d.z)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, BodyError> {
        let mut lines = Lines {
            inner: r.lines(),
            line: 0,
        };
        let head = lines.next_line()?;
        if head.trim() != HEADER {
            return Err(lines.err(format!("expected header {HEADER:?}")));
        }
        let n = lines.section("vertices", 1)?[0];
        let vertices = lines.vec3s(n)?;
        let nk = lines.section("weights", 2)?;
        if nk[0] != n {
            return Err(lines.err("weight rows differ from vertex count".into()));
        }
        let k = nk[1];
        let mut weights = Vec::with_capacity(n * k);
        for _ in 0..n {
            weights.extend(lines.floats(k)?);
        }
        if lines.section("joints", 1)?[0] != k {
            return Err(lines.err("joint count differs from weight columns".into()));
        }
        let mut parents = Vec::with_capacity(k);
        let mut joints = Vec::with_capacity(k);
        for _ in 0..k {
            let f = lines.floats(4)?;
            parents.push((f[0] >= 0.0).then_some(f[0] as usize));
            joints.push(Vec3::new(f[1], f[2], f[3]));
        }
        let t = lines.section("triangles", 1)?[0];
        let mut triangles = Vec::with_capacity(t);
        for _ in 0..t {
            let f = lines.floats(3)?;
            triangles.push([f[0] as u32, f[1] as u32, f[2] as u32]);
        }
        let s = lines.section("shape", 1)?[0];
        let mut shape_dirs = Vec::with_capacity(s);
        let mut joint_shape_dirs = Vec::with_capacity(s);
        for _ in 0..s {
            shape_dirs.push(lines.vec3s(n)?);
            joint_shape_dirs.push(lines.vec3s(k)?);
        }
        let tmpl = BodyTemplate {
            vertices,
            weights,
            parents,
            joints,
            triangles,
            shape_dirs,
            joint_shape_dirs,
        };
        tmpl.validate()?;
        Ok(tmpl)
    }
}

struct Lines<I> {
    inner: I,
    line: usize,
}

impl<I: Iterator<Item = std::io::Result<String>>> Lines<I> {
    fn err(&self, msg: String) -> BodyError {
        BodyError::Parse {
            line: self.line,
            msg,
        }
    }

    fn next_line(&mut self) -> Result<String, BodyError> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(self.err("unexpected end of file".into())),
        }
    }

    fn section(&mut self, name: &str, count: usize) -> Result<Vec<usize>, BodyError> {
        let l = self.next_line()?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(name) {
            return Err(self.err(format!("expected section {name:?}")));
        }
        let vals: Result<Vec<usize>, _> = toks.map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == count => Ok(v),
            _ => Err(self.err(format!("bad {name} header"))),
        }
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f64>, BodyError> {
        let l = self.next_line()?;
        let vals: Result<Vec<f64>, _> = l.split_whitespace().map(str::parse).collect();
        match vals {
            Ok(v) if v.len() == count => Ok(v),
            _ => Err(self.err(format!("expected {count} numbers"))),
        }
    }

    fn vec3s(&mut self, count: usize) -> Result<Vec<Vec3>, BodyError> {
        (0..count)
            .map(|_| self.floats(3).map(|f| Vec3::new(f[0], f[1], f[2])))
            .collect()
    }
}
