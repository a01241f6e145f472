use cardiolts::vtk::{vtk_string, Field, VtkData};
use cardiolts::{Basis, ForestMesh};

const GOLDEN: &str = include_str!("golden/unit_quad_p1.vtk");

fn unit_quad() -> (ForestMesh, Basis) {
    (ForestMesh::build_cartesian_root(&[1.0, 1.0], &[1, 1], 2).unwrap(), Basis::new(1, 2).unwrap())
}

#[test]
fn unit_quad_constant_field_matches_golden_file() {
    let (mesh, basis) = unit_quad();
    let phi = [-85.0; 4];
    let text = vtk_string(&mesh, &basis, &[Field { name: "phi", values: &phi }], &[]).unwrap();
    if std::env::var_os("CARDIOLTS_WRITE_GOLDEN").is_some() {
        std::fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/unit_quad_p1.vtk"), &text).unwrap();
    }
    assert_eq!(text, GOLDEN);
}

#[test]
fn empty_field_list_is_geometry_only_and_loadable() {
    let (mesh, basis) = unit_quad();
    let text = vtk_string(&mesh, &basis, &[], &[]).unwrap();
    assert!(!text.contains("POINT_DATA"));
    let data = VtkData::parse(&text).unwrap();
    assert_eq!(data.points.len(), 4);
    assert_eq!(data.cell_types, vec![9]);
}
