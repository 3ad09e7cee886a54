// Virtual-globe renderer: a three.js sphere with graticule, scene objects
// (sketches, placements, layers), clickable markers, and a camera driven by
// the shared pose. 1 scene unit = 1 km.

import * as THREE from "three";
import type { CameraPose } from "./camera";
import type { GeoAnchor } from "./protocol";
import type { SceneReplica, Sketch } from "./scene";

export const GLOBE_RADIUS_KM = 6371.0088;
const DEG = Math.PI / 180;

export function latLonToVector3(lat: number, lon: number, heightM = 0): THREE.Vector3 {
  const r = GLOBE_RADIUS_KM + heightM / 1000;
  const phi = lat * DEG;
  const lam = lon * DEG;
  return new THREE.Vector3(
    r * Math.cos(phi) * Math.cos(lam),
    r * Math.sin(phi),
    -r * Math.cos(phi) * Math.sin(lam),
  );
}

export function vector3ToLatLon(v: THREE.Vector3): { lat: number; lon: number } {
  const r = v.length();
  const lat = Math.asin(v.y / r) / DEG;
  let lon = Math.atan2(-v.z, v.x) / DEG;
  if (lon >= 180) lon -= 360;
  if (lon < -180) lon += 360;
  return { lat, lon };
}

function enuFrame(lat: number, lon: number): { up: THREE.Vector3; east: THREE.Vector3; north: THREE.Vector3 } {
  const phi = lat * DEG;
  const lam = lon * DEG;
  const up = new THREE.Vector3(
    Math.cos(phi) * Math.cos(lam),
    Math.sin(phi),
    -Math.cos(phi) * Math.sin(lam),
  );
  const east = new THREE.Vector3(-Math.sin(lam), 0, -Math.cos(lam));
  const north = new THREE.Vector3().crossVectors(up, east).normalize();
  return { up, east, north };
}

export interface MarkerSpec {
  id: string;
  anchor: GeoAnchor;
  color: number;
  label?: string;
}

const MODEL_COLORS: Record<string, number> = {
  building_a: 0x8d99ae,
  building_b: 0xbc9ec1,
  tree_a: 0x2d6a4f,
  tree_b: 0x40916c,
  lamp: 0xf4a261,
};

export class GlobeView {
  readonly scene = new THREE.Scene();
  readonly camera: THREE.PerspectiveCamera;
  private renderer: THREE.WebGLRenderer;
  private sketchGroup = new THREE.Group();
  private placementGroup = new THREE.Group();
  private layerGroup = new THREE.Group();
  private markerGroup = new THREE.Group();
  private raycaster = new THREE.Raycaster();
  private globeMesh: THREE.Mesh;
  onMarkerClick: ((id: string) => void) | null = null;
  onGroundClick: ((anchor: GeoAnchor) => void) | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(55, 1, 0.1, 80_000);
    this.scene.background = new THREE.Color(0x0b132b);

    this.globeMesh = new THREE.Mesh(
      new THREE.SphereGeometry(GLOBE_RADIUS_KM, 96, 96),
      new THREE.MeshPhongMaterial({ color: 0x1c4966, specular: 0x223344, shininess: 8 }),
    );
    this.scene.add(this.globeMesh);
    this.scene.add(this.buildGraticule());
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.65));
    const sun = new THREE.DirectionalLight(0xffffff, 1.4);
    sun.position.set(2, 1, 1).multiplyScalar(GLOBE_RADIUS_KM * 3);
    this.scene.add(sun);
    this.scene.add(this.sketchGroup, this.placementGroup, this.layerGroup, this.markerGroup);

    canvas.addEventListener("pointerdown", (event) => this.handlePointer(event));
    this.resize();
    window.addEventListener("resize", () => this.resize());
  }

  private buildGraticule(): THREE.Group {
    const group = new THREE.Group();
    const material = new THREE.LineBasicMaterial({ color: 0x3a6ea5, transparent: true, opacity: 0.35 });
    for (let lat = -75; lat <= 75; lat += 15) {
      const pts = [];
      for (let lon = -180; lon <= 180; lon += 3) pts.push(latLonToVector3(lat, Math.min(lon, 179.999), 2000));
      group.add(new THREE.Line(new THREE.BufferGeometry().setFromPoints(pts), material));
    }
    for (let lon = -180; lon < 180; lon += 15) {
      const pts = [];
      for (let lat = -90; lat <= 90; lat += 3) pts.push(latLonToVector3(lat, lon, 2000));
      group.add(new THREE.Line(new THREE.BufferGeometry().setFromPoints(pts), material));
    }
    return group;
  }

  resize(): void {
    const width = this.canvas.clientWidth || this.canvas.width || 800;
    const height = this.canvas.clientHeight || this.canvas.height || 600;
    this.renderer.setSize(width, height, false);
    this.camera.aspect = width / Math.max(1, height);
    this.camera.updateProjectionMatrix();
  }

  applyPose(pose: CameraPose): void {
    const { up, east, north } = enuFrame(pose.lat, pose.lon);
    const position = latLonToVector3(pose.lat, pose.lon, Math.max(pose.height, 2));
    const h = pose.heading * DEG;
    const p = pose.pitch * DEG;
    const dir = new THREE.Vector3()
      .addScaledVector(north, Math.cos(h) * Math.cos(p))
      .addScaledVector(east, Math.sin(h) * Math.cos(p))
      .addScaledVector(up, Math.sin(p));
    this.camera.position.copy(position);
    const upVec = up.clone();
    if (pose.roll) upVec.applyAxisAngle(dir.clone().normalize(), pose.roll * DEG);
    this.camera.up.copy(upVec);
    this.camera.lookAt(position.clone().add(dir));
  }

  /** Rebuild scene objects from the replica (desk-scale scenes; cheap). */
  syncScene(replica: SceneReplica): void {
    this.rebuildSketches(replica);
    this.rebuildPlacements(replica);
    this.rebuildLayers(replica);
  }

  private rebuildSketches(replica: SceneReplica): void {
    this.sketchGroup.clear();
    for (const sketch of replica.sketches.values()) {
      this.sketchGroup.add(this.sketchObject(sketch));
    }
  }

  private sketchObject(sketch: Sketch): THREE.Object3D {
    const color = 0xffd166;
    const pts = sketch.vertices.map((v) => latLonToVector3(v.lat, v.lon, (v.height ?? 0) + 8));
    if (sketch.kind === "text_annotation") {
      return this.textSprite(sketch.text ?? "", pts[0]!, color);
    }
    const geometry = new THREE.BufferGeometry().setFromPoints(
      sketch.kind === "polygon" ? [...pts, pts[0]!] : pts,
    );
    const line = new THREE.Line(geometry, new THREE.LineBasicMaterial({ color, linewidth: 2 }));
    if (sketch.kind === "arrow" && pts.length === 2) {
      const head = new THREE.Mesh(
        new THREE.ConeGeometry(1.2, 3.5, 8),
        new THREE.MeshBasicMaterial({ color }),
      );
      head.position.copy(pts[1]!);
      head.quaternion.setFromUnitVectors(
        new THREE.Vector3(0, 1, 0),
        pts[1]!.clone().sub(pts[0]!).normalize(),
      );
      const group = new THREE.Group();
      group.add(line, head);
      return group;
    }
    return line;
  }

  private rebuildPlacements(replica: SceneReplica): void {
    this.placementGroup.clear();
    for (const placement of replica.placements.values()) {
      const color = MODEL_COLORS[placement.model_ref] ?? 0xe0e1dd;
      const scale = placement.scale ?? 1;
      const mesh = new THREE.Mesh(
        new THREE.BoxGeometry(2 * scale, 4 * scale, 2 * scale),
        new THREE.MeshPhongMaterial({ color }),
      );
      const base = latLonToVector3(placement.position.lat, placement.position.lon, placement.position.height ?? 0);
      const { up, north } = enuFrame(placement.position.lat, placement.position.lon);
      mesh.position.copy(base).addScaledVector(up, 2 * scale);
      mesh.up.copy(up);
      mesh.lookAt(base.clone().addScaledVector(north, 10));
      mesh.rotateY(-(placement.heading ?? 0) * DEG);
      this.placementGroup.add(mesh);
    }
  }

  private rebuildLayers(replica: SceneReplica): void {
    this.layerGroup.clear();
    const material = new THREE.LineBasicMaterial({ color: 0x90e0ef });
    for (const layer of replica.layers.values()) {
      for (const feature of layer.features) {
        const pts = feature.coordinates.map((c) => latLonToVector3(c.lat, c.lon, (c.height ?? 0) + 5));
        if (feature.geometry_type === "point") {
          const dot = new THREE.Mesh(
            new THREE.SphereGeometry(0.8, 8, 8),
            new THREE.MeshBasicMaterial({ color: 0x90e0ef }),
          );
          dot.position.copy(pts[0]!);
          this.layerGroup.add(dot);
        } else {
          const closed = feature.geometry_type === "polygon" ? [...pts, pts[0]!] : pts;
          this.layerGroup.add(new THREE.Line(new THREE.BufferGeometry().setFromPoints(closed), material));
        }
      }
    }
  }

  setMarkers(markers: MarkerSpec[]): void {
    this.markerGroup.clear();
    for (const marker of markers) {
      const mesh = new THREE.Mesh(
        new THREE.SphereGeometry(1.6, 12, 12),
        new THREE.MeshBasicMaterial({ color: marker.color }),
      );
      mesh.position.copy(latLonToVector3(marker.anchor.lat, marker.anchor.lon, (marker.anchor.height ?? 0) + 12));
      mesh.userData.markerId = marker.id;
      this.markerGroup.add(mesh);
      if (marker.label) {
        const sprite = this.textSprite(marker.label, mesh.position.clone().add(new THREE.Vector3(0, 3, 0)), marker.color);
        this.markerGroup.add(sprite);
      }
    }
  }

  private textSprite(text: string, position: THREE.Vector3, color: number): THREE.Sprite {
    const canvas = document.createElement("canvas");
    canvas.width = 512;
    canvas.height = 96;
    const ctx = canvas.getContext("2d")!;
    ctx.font = "42px sans-serif";
    ctx.fillStyle = `#${color.toString(16).padStart(6, "0")}`;
    ctx.textBaseline = "middle";
    ctx.fillText(text.slice(0, 28), 8, 48);
    const sprite = new THREE.Sprite(
      new THREE.SpriteMaterial({ map: new THREE.CanvasTexture(canvas), transparent: true }),
    );
    sprite.position.copy(position);
    sprite.scale.set(24, 4.5, 1);
    return sprite;
  }

  private handlePointer(event: PointerEvent): void {
    const rect = this.canvas.getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((event.clientX - rect.left) / rect.width) * 2 - 1,
      -((event.clientY - rect.top) / rect.height) * 2 + 1,
    );
    this.raycaster.setFromCamera(ndc, this.camera);
    const markerHits = this.raycaster.intersectObjects(this.markerGroup.children, false);
    const markerHit = markerHits.find((h) => h.object.userData.markerId);
    if (markerHit && this.onMarkerClick) {
      this.onMarkerClick(String(markerHit.object.userData.markerId));
      return;
    }
    const globeHits = this.raycaster.intersectObject(this.globeMesh, false);
    const first = globeHits[0];
    if (first && this.onGroundClick) {
      const { lat, lon } = vector3ToLatLon(first.point);
      this.onGroundClick({ lat, lon, height: 0 });
    }
  }

  render(): void {
    this.renderer.render(this.scene, this.camera);
  }
}
