use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// A point cloud with optional per-point attributes.
///
/// Every channel has exactly one entry per point. Colors are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
    colors: Option<Vec<[f64; 3]>>,
    height: Option<Vec<f64>>,
    labels: Option<Vec<i32>>,
    extra: Vec<(String, Vec<f64>)>,
}

/// Scalar channel names understood by [`PointCloud::channel`], besides any
/// extra channels a cloud carries.
pub const BUILTIN_CHANNELS: [&str; 10] = [
    "x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "height",
];

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Self {
        Self {
            positions,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.len() {
            return Err(Error::shape(format!(
                "{what} has {len} entries, cloud has {} points",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn with_normals(mut self, normals: Vec<[f64; 3]>) -> Result<Self> {
        self.check_len(normals.len(), "normals")?;
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_colors(mut self, colors: Vec<[f64; 3]>) -> Result<Self> {
        self.check_len(colors.len(), "colors")?;
        if let Some(c) = colors.iter().flatten().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidInput(format!("color value {c} outside [0, 1]")));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    pub fn with_height(mut self, height: Vec<f64>) -> Result<Self> {
        self.check_len(height.len(), "height")?;
        self.height = Some(height);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<i32>) -> Result<Self> {
        self.check_len(labels.len(), "labels")?;
        self.labels = Some(labels);
        Ok(self)
    }

    /// Adds or replaces a named scalar channel.
    pub fn with_extra(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.set_extra(name, values)?;
        Ok(self)
    }

    pub fn set_extra(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.check_len(values.len(), name)?;
        if BUILTIN_CHANNELS.contains(&name) || name == "label" {
            return Err(Error::InvalidInput(format!(
                "'{name}' is a built-in channel name"
            )));
        }
        match self.extra.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => *v = values,
            None => self.extra.push((name.to_string(), values)),
        }
        Ok(())
    }

    pub fn set_labels(&mut self, labels: Vec<i32>) -> Result<()> {
        self.check_len(labels.len(), "labels")?;
        self.labels = Some(labels);
        Ok(())
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.positions
    }

    pub fn normals(&self) -> Option<&[[f64; 3]]> {
        self.normals.as_deref()
    }

    pub fn normals_mut(&mut self) -> Option<&mut [[f64; 3]]> {
        self.normals.as_deref_mut()
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    pub fn colors_mut(&mut self) -> Option<&mut [[f64; 3]]> {
        self.colors.as_deref_mut()
    }

    pub fn height(&self) -> Option<&[f64]> {
        self.height.as_deref()
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn extra(&self) -> &[(String, Vec<f64>)] {
        &self.extra
    }

    /// Values of a scalar channel, if the cloud has it.
    pub fn channel(&self, name: &str) -> Option<Vec<f64>> {
        let axis = |v: &Vec<[f64; 3]>, i: usize| v.iter().map(|p| p[i]).collect();
        match name {
            "x" => Some(axis(&self.positions, 0)),
            "y" => Some(axis(&self.positions, 1)),
            "z" => Some(axis(&self.positions, 2)),
            "nx" => self.normals.as_ref().map(|n| axis(n, 0)),
            "ny" => self.normals.as_ref().map(|n| axis(n, 1)),
            "nz" => self.normals.as_ref().map(|n| axis(n, 2)),
            "red" => self.colors.as_ref().map(|c| axis(c, 0)),
            "green" => self.colors.as_ref().map(|c| axis(c, 1)),
            "blue" => self.colors.as_ref().map(|c| axis(c, 2)),
            "height" => self.height.clone(),
            _ => self
                .extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone()),
        }
    }

    /// Names of every scalar attribute channel except positions.
    pub fn attribute_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.normals.is_some() {
            names.extend(["nx", "ny", "nz"].map(String::from));
        }
        if self.colors.is_some() {
            names.extend(["red", "green", "blue"].map(String::from));
        }
        if self.height.is_some() {
            names.push("height".into());
        }
        names.extend(self.extra.iter().map(|(n, _)| n.clone()));
        names
    }

    /// Writes a scalar channel by name, creating an extra channel for
    /// unknown names. Built-in grouped channels must already exist.
    pub fn set_channel(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.check_len(values.len(), name)?;
        let write_axis = |target: &mut Vec<[f64; 3]>, i: usize| {
            for (p, v) in target.iter_mut().zip(&values) {
                p[i] = *v;
            }
        };
        let missing = || Error::Config(format!("cloud has no '{name}' channel group to write into"));
        match name {
            "x" | "y" | "z" => write_axis(&mut self.positions, axis_index(name)),
            "nx" | "ny" | "nz" => write_axis(self.normals.as_mut().ok_or_else(missing)?, axis_index(&name[1..])),
            "red" | "green" | "blue" => {
                if let Some(c) = values.iter().find(|c| !(0.0..=1.0).contains(*c)) {
                    return Err(Error::InvalidInput(format!("color value {c} outside [0, 1]")));
                }
                let i = ["red", "green", "blue"].iter().position(|c| *c == name).unwrap();
                write_axis(self.colors.as_mut().ok_or_else(missing)?, i)
            }
            "height" => self.height = Some(values),
            _ => self.set_extra(name, values)?,
        }
        Ok(())
    }

    /// Ensures the named channel groups exist (zero-filled), so that
    /// [`PointCloud::set_channel`] can write into them.
    pub fn ensure_group(&mut self, name: &str) {
        let n = self.len();
        match name {
            "nx" | "ny" | "nz" if self.normals.is_none() => self.normals = Some(vec![[0.0; 3]; n]),
            "red" | "green" | "blue" if self.colors.is_none() => self.colors = Some(vec![[0.0; 3]; n]),
            _ => {}
        }
    }

    /// The points at `indices`, in that order, with all channels.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        let pick3 = |v: &Vec<[f64; 3]>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PointCloud {
            positions: pick3(&self.positions),
            normals: self.normals.as_ref().map(pick3),
            colors: self.colors.as_ref().map(pick3),
            height: self.height.as_ref().map(|h| indices.iter().map(|&i| h[i]).collect()),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            extra: self
                .extra
                .iter()
                .map(|(n, v)| (n.clone(), indices.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    /// Stacks the named scalar channels into an `n × k` matrix.
    ///
    /// A missing `height` is derived as the coordinate along `gravity_axis`
    /// minus its minimum; any other missing channel is a config error.
    pub fn select(&self, names: &[String], gravity_axis: usize) -> Result<FeatureMatrix> {
        let mut columns = Vec::with_capacity(names.len());
        for name in names {
            let column = match self.channel(name) {
                Some(c) => c,
                None if name == "height" => self.derived_height(gravity_axis),
                None => {
                    return Err(Error::Config(format!(
                        "point cloud has no '{name}' channel"
                    )))
                }
            };
            columns.push(column);
        }
        let n = self.len();
        let mut out = FeatureMatrix::zeros(n, columns.len());
        for (c, column) in columns.iter().enumerate() {
            for (r, v) in column.iter().enumerate() {
                out.set(r, c, *v);
            }
        }
        Ok(out)
    }

    pub fn derived_height(&self, gravity_axis: usize) -> Vec<f64> {
        let ground = self
            .positions
            .iter()
            .map(|p| p[gravity_axis])
            .fold(f64::INFINITY, f64::min);
        self.positions.iter().map(|p| p[gravity_axis] - ground).collect()
    }
}

fn axis_index(name: &str) -> usize {
    match name {
        "x" => 0,
        "y" => 1,
        _ => 2,
    }
}

/// Which cloud channels feed the network as input features and which
/// define the lattice space.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSelection {
    pub features: Vec<String>,
    pub lattice: Vec<String>,
    /// Axis used to derive `height` when a cloud lacks it (0 = x, 1 = y, 2 = z).
    pub gravity_axis: usize,
}

impl ChannelSelection {
    /// Group aliases `xyz`, `normal`/`normals` and `rgb` expand to their
    /// scalar channels.
    pub fn new<S: AsRef<str>>(features: &[S], lattice: &[S]) -> Self {
        Self {
            features: expand_channels(features),
            lattice: expand_channels(lattice),
            gravity_axis: 1,
        }
    }

    /// XYZ for both input features and lattice.
    pub fn xyz() -> Self {
        Self::new(&["xyz"], &["xyz"])
    }

    pub fn feature_width(&self) -> usize {
        self.features.len()
    }

    pub fn lattice_width(&self) -> usize {
        self.lattice.len()
    }
}

pub fn expand_channels<S: AsRef<str>>(names: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    for name in names {
        match name.as_ref().trim() {
            "xyz" => out.extend(["x", "y", "z"].map(String::from)),
            "normal" | "normals" => out.extend(["nx", "ny", "nz"].map(String::from)),
            "rgb" => out.extend(["red", "green", "blue"].map(String::from)),
            "" => {}
            other => out.push(other.to_string()),
        }
    }
    out
}
