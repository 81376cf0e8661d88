use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pinhole camera.
///
/// `rotation` maps camera axes to world axes (columns are the camera x/y/z
/// axes in world coordinates) and `translation` is the camera centre in world
/// units. Camera space looks down +z with +x right and +y down; pixel
/// `(col, row)` has its centre at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

impl<T: Scalar> CameraPose<T> {
    pub fn new(
        rotation: [[T; 3]; 3],
        translation: [T; 3],
        fx: T,
        fy: T,
        cx: T,
        cy: T,
    ) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Identity orientation at `translation`.
    pub fn looking_forward(translation: [T; 3], focal: T, cx: T, cy: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation,
            fx: focal,
            fy: focal,
            cx,
            cy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::InvalidArgument(
                "focal lengths must be positive".into(),
            ));
        }
        let r = &self.rotation;
        let tol = T::lit(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).map(|k| r[k][i] * r[k][j]).sum::<T>();
                let expect = if i == j { T::one() } else { T::zero() };
                if (dot - expect).abs() > tol {
                    return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> CameraPose<U> {
        let c = |v: T| U::lit(v.as_f64());
        CameraPose {
            rotation: self.rotation.map(|row| row.map(c)),
            translation: self.translation.map(c),
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
        }
    }

    /// World point to camera coordinates: `R^T (x - t)`.
    pub fn to_camera(&self, x: [T; 3]) -> [T; 3] {
        let d = [
            x[0] - self.translation[0],
            x[1] - self.translation[1],
            x[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn to_world(&self, c: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * c[0] + r[i][1] * c[1] + r[i][2] * c[2];
        }
        out
    }

    /// Pixel coordinates and camera depth `(u, v, z)`; `z <= 0` means the
    /// point is not in front of the camera (u and v are then meaningless).
    pub fn project(&self, x: [T; 3]) -> (T, T, T) {
        let c = self.to_camera(x);
        let z = c[2];
        if z <= T::zero() {
            return (self.cx, self.cy, z);
        }
        (
            self.fx * c[0] / z + self.cx,
            self.fy * c[1] / z + self.cy,
            z,
        )
    }

    /// World point at camera depth `z` seen at pixel `(u, v)`.
    pub fn unproject(&self, u: T, v: T, z: T) -> [T; 3] {
        self.to_world([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z])
    }

    /// Unit world-space direction of the ray through pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: T, v: T) -> [T; 3] {
        let c = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one()];
        let r = &self.rotation;
        let d = [
            r[0][0] * c[0] + r[0][1] * c[1] + r[0][2] * c[2],
            r[1][0] * c[0] + r[1][1] * c[1] + r[1][2] * c[2],
            r[2][0] * c[0] + r[2][1] * c[1] + r[2][2] * c[2],
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        [d[0] / n, d[1] / n, d[2] / n]
    }

    pub fn center(&self) -> [T; 3] {
        self.translation
    }
}

/// Rotation about an arbitrary axis (Rodrigues).
pub fn axis_angle<T: Scalar>(axis: [T; 3], angle: T) -> [[T; 3]; 3] {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
